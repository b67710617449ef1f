//! 8-bit PNM interchange: colour frames as P6 PPM, masks and depth as P5 PGM
//! (masks: 0 = corrupted, 255 = valid), one file per frame named
//! `frame_0000.ppm` / `frame_0000.pgm`.

use std::fs;
use std::path::{Path, PathBuf};

use daevi_core::data::Clip;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};

use crate::{Error, Result};

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn frame_path(dir: &Path, t: usize, ext: &str) -> PathBuf {
    dir.join(format!("frame_{t:04}.{ext}"))
}

/// Write every frame of a 1- or 3-channel clip.
pub fn export_frames(dir: &Path, clip: &Clip) -> Result<()> {
    let (ext, subtype, color) = match clip.channels {
        3 => ("ppm", PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8),
        1 => ("pgm", PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8),
        c => return Err(Error::Usage(format!("PNM export needs 1 or 3 channels, clip has {c}"))),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let plane = clip.height * clip.width;
    for t in 0..clip.frames {
        let f = clip.frame(t);
        let mut pixels = Vec::with_capacity(f.len());
        for i in 0..plane {
            for c in 0..clip.channels {
                pixels.push(quantize(f[c * plane + i]));
            }
        }
        let path = frame_path(dir, t, ext);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        PnmEncoder::new(std::io::BufWriter::new(file))
            .with_subtype(subtype)
            .write_image(&pixels, clip.width as u32, clip.height as u32, color)
            .map_err(|e| Error::Format { path: path.clone(), offset: 0, detail: e.to_string() })?;
    }
    Ok(())
}

/// Read `frame_0000.*`, `frame_0001.*`, … until the first missing index.
pub fn import_frames(dir: &Path, channels: usize) -> Result<Clip> {
    let ext = match channels {
        3 => "ppm",
        1 => "pgm",
        c => return Err(Error::Usage(format!("PNM import needs 1 or 3 channels, asked for {c}"))),
    };
    let mut data = Vec::new();
    let (mut h, mut w) = (0, 0);
    let mut t = 0;
    loop {
        let path = frame_path(dir, t, ext);
        if !path.exists() {
            break;
        }
        let img = image::open(&path).map_err(|e| Error::Format { path: path.clone(), offset: 0, detail: e.to_string() })?;
        let (fw, fh) = (img.width() as usize, img.height() as usize);
        if t == 0 {
            (h, w) = (fh, fw);
        } else if (fh, fw) != (h, w) {
            return Err(Error::Format { path, offset: 0, detail: format!("frame is {fw}×{fh}, earlier frames {w}×{h}") });
        }
        let raw: Vec<u8> = if channels == 3 { img.to_rgb8().into_raw() } else { img.to_luma8().into_raw() };
        for c in 0..channels {
            data.extend(raw.iter().skip(c).step_by(channels).map(|&b| b as f32 / 255.0));
        }
        t += 1;
    }
    if t == 0 {
        return Err(Error::Usage(format!("{} holds no frame_0000.{ext}", dir.display())));
    }
    Ok(Clip::new(t, channels, h, w, data)?)
}
