//! JSON reports, text tables and error heatmaps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use vjdd_core::flowmetrics::{FlowSource, MetricOptions, PairAlignment};
use vjdd_core::Tensor;

use crate::config::NoiseLevel;
use crate::error::{io_err, Error, Result};
use crate::harness::{AblationRow, EvalReport};

/// An f64 that keeps infinities and NaN through JSON as `"inf"`, `"-inf"` and `"nan"`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Num(pub f64);

impl Serialize for Num {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let v = self.0;
        if v.is_finite() {
            s.serialize_f64(v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }
}

impl<'de> Deserialize<'de> for Num {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(f64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(v) => Ok(Num(v)),
            Raw::S(s) => match s.as_str() {
                "inf" => Ok(Num(f64::INFINITY)),
                "-inf" => Ok(Num(f64::NEG_INFINITY)),
                "nan" => Ok(Num(f64::NAN)),
                _ => Err(serde::de::Error::custom(format!("not a number: {s}"))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Means {
    pub psnr: Option<Num>,
    pub ssim: Option<Num>,
    pub we: Option<Num>,
    pub tof: Option<Num>,
    pub rwe: Option<Num>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipSummary {
    pub id: String,
    pub psnr: Vec<Num>,
    pub ssim: Vec<Num>,
    /// Per consecutive pair; `None` where the occlusion mask is empty.
    pub we: Vec<Option<Num>>,
    pub tof: Vec<Num>,
    pub rwe: Vec<Option<Num>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub level: String,
    pub mean: Means,
    pub clips: Vec<ClipSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub variant: String,
    pub mean: Means,
    pub perceptual: Num,
    /// Hex fingerprint of the first fine-tuning batch.
    pub first_batch: String,
}

fn nums(v: &[f64]) -> Vec<Num> {
    v.iter().copied().map(Num).collect()
}

fn means(r: &EvalReport) -> Means {
    Means {
        psnr: r.mean_psnr().map(Num),
        ssim: r.mean_ssim().map(Num),
        we: r.mean_we().map(Num),
        tof: r.mean_tof().map(Num),
        rwe: r.mean_rwe().map(Num),
    }
}

impl MethodSummary {
    pub fn from_report(r: &EvalReport) -> Self {
        Self {
            method: r.method.clone(),
            level: r.level.name().into(),
            mean: means(r),
            clips: r
                .clips
                .iter()
                .map(|c| ClipSummary {
                    id: c.id.clone(),
                    psnr: nums(&c.report.psnr),
                    ssim: nums(&c.report.ssim),
                    we: c.report.pairs.iter().map(|p| p.we.map(Num)).collect(),
                    tof: c.report.pairs.iter().map(|p| Num(p.tof)).collect(),
                    rwe: c.report.pairs.iter().map(|p| p.rwe.map(Num)).collect(),
                })
                .collect(),
        }
    }
}

impl AblationSummary {
    pub fn from_row(row: &AblationRow) -> Self {
        Self {
            variant: row.variant.label().into(),
            mean: means(&row.report),
            perceptual: Num(row.perceptual),
            first_batch: format!("{:016x}", row.first_batch),
        }
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    fs::write(path, to_json(value)?).map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

fn cell(v: Option<Num>, digits: usize) -> String {
    match v {
        Some(Num(x)) if x.is_infinite() && x > 0.0 => "inf".into(),
        Some(Num(x)) => format!("{x:.digits$}"),
        None => "n/a".into(),
    }
}

fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            rows.iter()
                .map(|r| r[i].len())
                .chain([header[i].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let line = |out: &mut String, cells: &[&str]| {
        for (i, c) in cells.iter().enumerate() {
            if i == 0 {
                let _ = write!(out, "{c:<w$}", w = widths[i]);
            } else {
                let _ = write!(out, "  {c:>w$}", w = widths[i]);
            }
        }
        out.push('\n');
    };
    line(&mut out, header);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    line(
        &mut out,
        &rule.iter().map(String::as_str).collect::<Vec<_>>(),
    );
    for r in rows {
        line(&mut out, &r.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}

/// Methods side by side, one row each.
pub fn comparison_table(methods: &[MethodSummary]) -> String {
    let rows: Vec<Vec<String>> = methods
        .iter()
        .map(|m| {
            vec![
                m.method.clone(),
                m.level.clone(),
                cell(m.mean.psnr, 2),
                cell(m.mean.ssim, 4),
                cell(m.mean.we, 5),
                cell(m.mean.tof, 4),
                cell(m.mean.rwe, 5),
            ]
        })
        .collect();
    table(
        &["method", "noise", "PSNR", "SSIM", "WE", "TOF", "RWE"],
        &rows,
    )
}

pub fn ablation_table(rows: &[AblationSummary]) -> String {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.variant.clone(),
                cell(r.mean.we, 5),
                cell(r.mean.tof, 4),
                cell(r.mean.rwe, 5),
                cell(r.mean.psnr, 2),
                cell(r.mean.ssim, 4),
                cell(Some(r.perceptual), 5),
            ]
        })
        .collect();
    table(
        &["variant", "WE", "TOF", "RWE", "PSNR", "SSIM", "L_p"],
        &rows,
    )
}

/// Amplification applied to error maps before they are written as images.
pub const HEATMAP_GAIN: f64 = 10.0;

fn gray(map: &Tensor, gain: f64) -> GrayImage {
    GrayImage::from_fn(map.width() as u32, map.height() as u32, |x, y| {
        let v = (map.at(0, y as usize, x as usize) * gain).clamp(0.0, 1.0);
        Luma([(v * 255.0).round() as u8])
    })
}

/// Write WE and RWE maps of every consecutive pair as `we_TTTT.png` and `rwe_TTTT.png`.
pub fn write_heatmaps(
    restored: &[Tensor],
    reference: &[Tensor],
    options: &MetricOptions,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    if restored.len() != reference.len() {
        return Err(Error::Config(format!(
            "{} restored frames for {} reference frames",
            restored.len(),
            reference.len()
        )));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    for t in 0..restored.len().saturating_sub(1) {
        let (rt, rt1, gt, gt1) = (
            &restored[t],
            &restored[t + 1],
            &reference[t],
            &reference[t + 1],
        );
        let (a, b) = match options.flow_source {
            FlowSource::Reference => (gt, gt1),
            FlowSource::Restored => (rt, rt1),
        };
        let align = PairAlignment::estimate(a, b, &options.estimator, options.occlusion_threshold)?;
        let we = align.warping_error_map(rt, rt1)?;
        let rwe = align.relational_error_map(rt, rt1, gt, gt1)?;
        for (name, map) in [("we", we), ("rwe", rwe)] {
            let p = dir.join(format!("{name}_{t:04}.png"));
            gray(&map, HEATMAP_GAIN).save(&p)?;
            written.push(p);
        }
    }
    Ok(written)
}

/// Parse a noise level name stored in a summary.
pub fn summary_level(m: &MethodSummary) -> Option<NoiseLevel> {
    NoiseLevel::from_name(&m.level)
}

#[cfg(test)]
mod tests {
    use super::*;
    use vjdd_core::flowmetrics::{MetricReport, PairMetrics};

    use crate::harness::ClipEval;

    fn report() -> EvalReport {
        EvalReport {
            method: "model".into(),
            level: NoiseLevel::Low,
            clips: vec![ClipEval {
                id: "eval-0".into(),
                report: MetricReport {
                    psnr: vec![f64::INFINITY, 30.5],
                    ssim: vec![1.0, 0.9],
                    pairs: vec![PairMetrics {
                        we: None,
                        tof: 0.25,
                        rwe: Some(0.0125),
                    }],
                },
            }],
        }
    }

    #[test]
    fn json_keeps_infinity_and_missing_values() {
        let s = MethodSummary::from_report(&report());
        let text = to_json(&s).unwrap();
        assert!(text.contains("\"inf\""));
        let back: MethodSummary = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.mean.psnr, Some(Num(f64::INFINITY)));
        assert_eq!(back.mean.we, None);
        assert_eq!(summary_level(&back), Some(NoiseLevel::Low));
        assert!(serde_json::from_str::<Num>("\"big\"").is_err());
    }

    #[test]
    fn tables_align_columns() {
        let s = MethodSummary::from_report(&report());
        let t = comparison_table(&[s.clone(), s]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines.iter().all(|l| l.len() == lines[0].len()));
        assert!(
            lines[2].contains("inf") && lines[2].contains("n/a") && lines[2].contains("0.01250")
        );
    }

    #[test]
    fn heatmaps_are_black_for_identical_clips() {
        let frames: Vec<Tensor> = (0..3)
            .map(|k| Tensor::from_fn(3, 16, 16, |c, y, x| ((x + 2 * y + c + k) % 9) as f64 / 9.0))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let paths =
            write_heatmaps(&frames, &frames, &MetricOptions::default(), dir.path()).unwrap();
        assert_eq!(paths.len(), 4);
        let rwe = image::open(dir.path().join("rwe_0001.png"))
            .unwrap()
            .to_luma8();
        assert!(rwe.pixels().all(|p| p[0] == 0));
    }
}
