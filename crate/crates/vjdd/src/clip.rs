//! Clean clips on disk: a directory of numbered PNG frames or one tensor file.
//!
//! PNG codes are read as linear values, `code / max_code`, with no transfer
//! curve removed.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Rgb};
use vjdd_core::degrade::{BayerPattern, NoiseParams, RawFrame};
use vjdd_core::Tensor;

use crate::error::{io_err, Error, Result};
use crate::tensorfile::{load_tensor, save_tensor, PortableTensor};

/// Ordered linear-RGB frames of equal, even size with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub id: String,
    pub frames: Vec<Tensor>,
    pub frame_rate: Option<f64>,
}

impl Clip {
    pub fn new(id: impl Into<String>, frames: Vec<Tensor>) -> std::result::Result<Self, String> {
        let clip = Self {
            id: id.into(),
            frames,
            frame_rate: None,
        };
        clip.check()?;
        Ok(clip)
    }

    fn check(&self) -> std::result::Result<(), String> {
        let first = self.frames.first().ok_or("clip has no frames")?;
        let s = first.shape();
        if s.c != 3 {
            return Err(format!("frames must have 3 channels, got {}", s.c));
        }
        if s.h % 2 != 0 || s.w % 2 != 0 {
            return Err(format!("frame size {}x{} is not even", s.h, s.w));
        }
        for (i, f) in self.frames.iter().enumerate() {
            if f.shape() != s {
                return Err(format!(
                    "frame {i} is {}x{}, frame 0 is {}x{}",
                    f.height(),
                    f.width(),
                    s.h,
                    s.w
                ));
            }
            if f.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(format!("frame {i} has values outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }
}

fn ingest(path: &Path, reason: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Trailing decimal digits of a file stem, e.g. `frame_0012` → 12.
fn frame_number(path: &Path) -> Option<u64> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem
        .chars()
        .rev()
        .take_while(char::is_ascii_digit)
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().ok()
}

pub fn image_to_tensor(img: &DynamicImage) -> Tensor {
    let rgb = img.to_rgb16();
    let (w, h) = rgb.dimensions();
    Tensor::from_fn(3, h as usize, w as usize, |c, y, x| {
        rgb.get_pixel(x as u32, y as u32)[c] as f64 / 65535.0
    })
}

fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| ingest(path, e.to_string()))?;
    Ok(match &img {
        DynamicImage::ImageRgb8(_) | DynamicImage::ImageLuma8(_) | DynamicImage::ImageRgba8(_) => {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            Tensor::from_fn(3, h as usize, w as usize, |c, y, x| {
                rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
            })
        }
        _ => image_to_tensor(&img),
    })
}

/// Load a clip from a directory of numbered PNGs or a `(N, 3, H, W)` tensor file.
pub fn load_clip(path: &Path) -> Result<Clip> {
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("clip")
        .to_string();
    let frames = if path.is_dir() {
        let mut numbered = Vec::new();
        for entry in fs::read_dir(path).map_err(io_err(path))? {
            let p = entry.map_err(io_err(path))?.path();
            let is_png = p
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"));
            if !is_png {
                continue;
            }
            let n = frame_number(&p)
                .ok_or_else(|| ingest(&p, "frame file name has no trailing number"))?;
            numbered.push((n, p));
        }
        numbered.sort();
        if numbered.is_empty() {
            return Err(ingest(path, "no PNG frames"));
        }
        for (k, pair) in numbered.windows(2).enumerate() {
            if pair[1].0 != pair[0].0 + 1 {
                return Err(ingest(
                    path,
                    format!(
                        "frame numbers jump from {} to {} after position {k}",
                        pair[0].0, pair[1].0
                    ),
                ));
            }
        }
        numbered
            .iter()
            .map(|(_, p)| load_png(p))
            .collect::<Result<Vec<_>>>()?
    } else if path.exists() {
        load_tensor(path)
            .and_then(|t| t.unstack())
            .map_err(|e| ingest(path, e.to_string()))?
    } else {
        return Err(ingest(path, "no such file or directory"));
    };
    Clip::new(id, frames).map_err(|r| ingest(path, r))
}

/// 16-bit PNG of a linear frame, values clipped to `[0, 1]`.
pub fn frame_to_png16(frame: &Tensor) -> ImageBuffer<Rgb<u16>, Vec<u16>> {
    let (h, w) = (frame.height(), frame.width());
    let channels = frame.channels();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            let v = frame.at(c.min(channels - 1), y as usize, x as usize);
            (v.clamp(0.0, 1.0) * 65535.0).round() as u16
        };
        Rgb([px(0), px(1), px(2)])
    })
}

pub fn save_png16(frame: &Tensor, path: &Path) -> Result<()> {
    frame_to_png16(frame).save(path)?;
    Ok(())
}

/// Write frames as `dir/00000.png, 00001.png, ...`.
pub fn save_clip_pngs(frames: &[Tensor], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let p = dir.join(format!("{i:05}.png"));
            save_png16(f, &p)?;
            Ok(p)
        })
        .collect()
}

pub fn save_clip_tensor(frames: &[Tensor], path: &Path) -> Result<()> {
    save_tensor(&PortableTensor::stack(frames)?, path)
}

pub const RAW_FILE: &str = "raw.vjdt";
pub const RAW_META_FILE: &str = "raw.meta";

/// Write raw frames to `dir` as an `(N, 1, H, W)` tensor plus a metadata file.
pub fn save_raw_clip(raws: &[RawFrame], dir: &Path) -> Result<()> {
    let first = raws
        .first()
        .ok_or_else(|| Error::Format("raw clip has no frames".into()))?;
    if raws
        .iter()
        .any(|r| r.noise != first.noise || r.pattern != first.pattern)
    {
        return Err(Error::Format(
            "raw frames of one clip must share noise parameters and pattern".into(),
        ));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let cfa: Vec<Tensor> = raws.iter().map(|r| r.cfa.clone()).collect();
    save_tensor(&PortableTensor::stack(&cfa)?, &dir.join(RAW_FILE))?;
    let meta = format!(
        "pattern = {}\nsigma_s = {}\nsigma_r = {}\n",
        first.pattern.name(),
        first.noise.sigma_s,
        first.noise.sigma_r
    );
    let p = dir.join(RAW_META_FILE);
    fs::write(&p, meta).map_err(io_err(&p))
}

pub fn load_raw_clip(dir: &Path) -> Result<Vec<RawFrame>> {
    let meta_path = dir.join(RAW_META_FILE);
    let meta = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let (mut pattern, mut s, mut r) = (None, None, None);
    for line in meta.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ingest(&meta_path, format!("bad line {line:?}")))?;
        let v = v.trim();
        match k.trim() {
            "pattern" => pattern = BayerPattern::from_name(v),
            "sigma_s" => s = v.parse::<f64>().ok(),
            "sigma_r" => r = v.parse::<f64>().ok(),
            other => return Err(ingest(&meta_path, format!("unknown key {other}"))),
        }
    }
    let (Some(pattern), Some(s), Some(r)) = (pattern, s, r) else {
        return Err(ingest(&meta_path, "needs pattern, sigma_s and sigma_r"));
    };
    let noise = NoiseParams::new(s, r)?;
    let cfa = load_tensor(&dir.join(RAW_FILE))?.unstack()?;
    cfa.into_iter()
        .map(|c| Ok(RawFrame::new(c, pattern, noise)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{ImageBuffer, Rgb};

    #[test]
    fn png_directory_loads_in_order() {
        let dir = tempfile::tempdir().unwrap();
        for i in [2u8, 0, 1] {
            let img = ImageBuffer::from_pixel(8, 8, Rgb([i * 100, 0, 255]));
            img.save(dir.path().join(format!("f{i:03}.png"))).unwrap();
        }
        let clip = load_clip(dir.path()).unwrap();
        assert_eq!((clip.len(), clip.height(), clip.width()), (3, 8, 8));
        assert_eq!(clip.frames[1].at(0, 0, 0), 100.0 / 255.0);
        assert_eq!(clip.frames[2].at(2, 3, 3), 1.0);
    }

    #[test]
    fn sixteen_bit_max_code_is_one() {
        let dir = tempfile::tempdir().unwrap();
        let img: ImageBuffer<Rgb<u16>, Vec<u16>> =
            ImageBuffer::from_pixel(4, 4, Rgb([65535, 0, 32768]));
        img.save(dir.path().join("0.png")).unwrap();
        let clip = load_clip(dir.path()).unwrap();
        assert_eq!(clip.frames[0].at(0, 1, 1), 1.0);
        assert_eq!(clip.frames[0].at(1, 1, 1), 0.0);
    }

    #[test]
    fn ragged_and_gapped_clips_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        ImageBuffer::from_pixel(8, 8, Rgb([0u8, 0, 0]))
            .save(dir.path().join("0.png"))
            .unwrap();
        ImageBuffer::from_pixel(10, 8, Rgb([0u8, 0, 0]))
            .save(dir.path().join("1.png"))
            .unwrap();
        assert!(matches!(load_clip(dir.path()), Err(Error::Ingest { .. })));
        let dir = tempfile::tempdir().unwrap();
        ImageBuffer::from_pixel(8, 8, Rgb([0u8, 0, 0]))
            .save(dir.path().join("0.png"))
            .unwrap();
        ImageBuffer::from_pixel(8, 8, Rgb([0u8, 0, 0]))
            .save(dir.path().join("2.png"))
            .unwrap();
        assert!(matches!(load_clip(dir.path()), Err(Error::Ingest { .. })));
        assert!(matches!(
            load_clip(&dir.path().join("missing")),
            Err(Error::Ingest { .. })
        ));
    }

    #[test]
    fn raw_clip_round_trips() {
        let noise = NoiseParams::new(2.5e-3, 1e-2).unwrap();
        let raws: Vec<RawFrame> = (0..2)
            .map(|k| {
                let cfa = Tensor::from_fn(1, 4, 4, |_, y, x| (y * 4 + x + k) as f64 * 0.03 - 0.01);
                RawFrame::new(cfa, BayerPattern::Grbg, noise).unwrap()
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        save_raw_clip(&raws, dir.path()).unwrap();
        assert_eq!(load_raw_clip(dir.path()).unwrap(), raws);
    }

    #[test]
    fn tensor_and_png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<Tensor> = (0..3)
            .map(|k| Tensor::from_fn(3, 4, 6, |c, y, x| ((c + y + x + k) % 7) as f64 / 6.0))
            .collect();
        let tpath = dir.path().join("clip.vjdt");
        save_clip_tensor(&frames, &tpath).unwrap();
        assert_eq!(load_clip(&tpath).unwrap().frames, frames);
        let pdir = dir.path().join("pngs");
        save_clip_pngs(&frames, &pdir).unwrap();
        let back = load_clip(&pdir).unwrap();
        for (a, b) in back.frames.iter().zip(&frames) {
            assert!(a.zip_map(b, |p, q| p - q).unwrap().max_abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }
}
