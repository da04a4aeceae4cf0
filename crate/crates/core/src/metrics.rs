//! Temporal consistency, edit accuracy, FLOP and state accounting, reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{GuidanceConfig, NoiseSchedule};
use crate::editor::{open_session, EditSession, FrameResult, SessionOptions};
use crate::error::{shape_err, Error, Result};
use crate::memory::Strategy;
use crate::model::Denoiser;
use crate::tensor::{flops, Tensor};
use crate::video::{prompt_color, LabeledVideo, PALETTE};

pub const REPORT_SCHEMA: u32 = 1;

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    match (na > 0.0, nb > 0.0) {
        (true, true) => (dot / (na * nb)).clamp(-1.0, 1.0),
        // Two zero vectors are treated as identical.
        (false, false) => 1.0,
        _ => 0.0,
    }
}

/// Mean cosine similarity of extractor features over adjacent pairs and over
/// all unordered pairs.
pub fn temporal_consistency<F>(frames: &[Tensor], mut extractor: F) -> Result<(f64, f64)>
where
    F: FnMut(&Tensor) -> Result<Vec<f32>>,
{
    if frames.len() < 2 {
        return Err(Error::Config(format!(
            "temporal consistency needs >= 2 frames, got {}",
            frames.len()
        )));
    }
    let feats = frames
        .iter()
        .map(&mut extractor)
        .collect::<Result<Vec<_>>>()?;
    let adjacent =
        feats.windows(2).map(|w| cosine(&w[0], &w[1])).sum::<f64>() / (feats.len() - 1) as f64;
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..feats.len() {
        for j in i + 1..feats.len() {
            sum += cosine(&feats[i], &feats[j]);
            pairs += 1;
        }
    }
    Ok((adjacent, sum / pairs as f64))
}

/// `edit_err`: mean over frames of |mean color inside the mask - target|_1 / 3.
/// `bg_err`: mean absolute deviation from the source outside the mask.
/// Frames whose mask is empty do not contribute to `edit_err`.
pub fn edit_accuracy(
    frames: &[Tensor],
    sources: &[Tensor],
    masks: &[Tensor],
    target: [f32; 3],
) -> Result<(f64, f64)> {
    if frames.is_empty() || frames.len() != masks.len() || frames.len() != sources.len() {
        return Err(shape_err(
            "edit_accuracy",
            format!(
                "{} frames, {} sources, {} masks",
                frames.len(),
                sources.len(),
                masks.len()
            ),
        ));
    }
    let (mut edit, mut edit_n, mut bg, mut bg_n) = (0.0, 0usize, 0.0, 0usize);
    for (i, ((f, s), m)) in frames.iter().zip(sources).zip(masks).enumerate() {
        let [c, h, w] = match f.shape() {
            &[c, h, w] => [c, h, w],
            other => {
                return Err(shape_err(
                    "edit_accuracy",
                    format!("frame {i} has shape {other:?}"),
                ))
            }
        };
        if c != 3 || s.shape() != f.shape() || m.shape() != [h, w] {
            return Err(shape_err(
                "edit_accuracy",
                format!(
                    "frame {i}: {:?}, source {:?}, mask {:?}",
                    f.shape(),
                    s.shape(),
                    m.shape()
                ),
            ));
        }
        let hw = h * w;
        let inside = m.data().iter().filter(|&&v| v > 0.5).count();
        let mut sums = [0.0f64; 3];
        let mut dev = 0.0f64;
        for (px, &mv) in m.data().iter().enumerate() {
            for ch in 0..3 {
                let v = f.data()[ch * hw + px] as f64;
                if mv > 0.5 {
                    sums[ch] += v;
                } else {
                    dev += (v - s.data()[ch * hw + px] as f64).abs();
                }
            }
        }
        if inside > 0 {
            edit += (0..3)
                .map(|ch| (sums[ch] / inside as f64 - target[ch] as f64).abs())
                .sum::<f64>()
                / 3.0;
            edit_n += 1;
        }
        if inside < hw {
            bg += dev / (3 * (hw - inside)) as f64;
            bg_n += 1;
        }
    }
    if edit_n == 0 {
        return Err(Error::Config("every mask is empty".into()));
    }
    Ok((
        edit / edit_n as f64,
        if bg_n == 0 { 0.0 } else { bg / bg_n as f64 },
    ))
}

/// Per-frame FLOP totals of successive computations.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCounter {
    pub per_frame: Vec<u64>,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Runs `f` under counting mode and records its cost as one frame.
    pub fn count<T>(&mut self, f: impl FnOnce() -> T) -> T {
        let (out, n) = count_flops(f);
        self.per_frame.push(n);
        out
    }

    pub fn total(&self) -> u64 {
        self.per_frame.iter().sum()
    }
}

/// Result of `f` and the FLOPs it executed on this thread.
pub fn count_flops<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let scope = flops::Scope::begin();
    let out = f();
    (out, scope.finish())
}

pub fn measure_state_size(session: &EditSession) -> usize {
    session.state_size()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub flops: u64,
    pub state_size: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: u32,
    pub strategy: String,
    pub video: String,
    pub tem_con_adjacent: f64,
    pub tem_con_allpairs: f64,
    pub edit_err: f64,
    pub bg_err: f64,
    pub frames: Vec<FrameMetrics>,
}

impl MetricsReport {
    pub fn frame_rows(results: &[FrameResult], state_sizes: &[usize]) -> Vec<FrameMetrics> {
        results
            .iter()
            .zip(state_sizes)
            .map(|(r, &s)| FrameMetrics {
                frame: r.index,
                flops: r.flops,
                state_size: s,
                seconds: r.latency_s,
            })
            .collect()
    }

    pub fn mean_flops(&self) -> f64 {
        self.frames.iter().map(|f| f.flops as f64).sum::<f64>() / self.frames.len().max(1) as f64
    }

    pub fn mean_seconds(&self) -> f64 {
        self.frames.iter().map(|f| f.seconds).sum::<f64>() / self.frames.len().max(1) as f64
    }

    pub fn max_state_size(&self) -> usize {
        self.frames.iter().map(|f| f.state_size).max().unwrap_or(0)
    }

    fn check_finite(&self) -> Result<()> {
        let scalars = [
            ("tem_con_adjacent", self.tem_con_adjacent),
            ("tem_con_allpairs", self.tem_con_allpairs),
            ("edit_err", self.edit_err),
            ("bg_err", self.bg_err),
        ];
        for (name, v) in scalars {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("metric {name}")));
            }
        }
        if let Some(f) = self.frames.iter().find(|f| !f.seconds.is_finite()) {
            return Err(Error::NonFinite(format!("latency of frame {}", f.frame)));
        }
        Ok(())
    }

    pub const CSV_HEADER: &'static str =
        "strategy,video,frame,flops,state_size,seconds,tem_con_adjacent,tem_con_allpairs,edit_err,bg_err";

    /// One row per frame; the scalar metrics repeat on every row.
    pub fn to_csv(&self) -> Result<String> {
        self.check_finite()?;
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for f in &self.frames {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                self.strategy,
                self.video,
                f.frame,
                f.flops,
                f.state_size,
                f.seconds,
                self.tem_con_adjacent,
                self.tem_con_allpairs,
                self.edit_err,
                self.bg_err
            ));
        }
        Ok(out)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, why: &str| Error::Malformed {
            offset: line as u64,
            reason: why.to_string(),
        };
        let mut lines = text.lines();
        if lines.next() != Some(Self::CSV_HEADER) {
            return Err(bad(0, "unexpected CSV header"));
        }
        let mut report: Option<Self> = None;
        for (i, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 10 {
                return Err(bad(i + 1, "expected 10 columns"));
            }
            let num = |k: usize| cols[k].parse::<f64>().map_err(|_| bad(i + 1, "bad number"));
            let int = |k: usize| {
                cols[k]
                    .parse::<u64>()
                    .map_err(|_| bad(i + 1, "bad integer"))
            };
            let r = report.get_or_insert(Self {
                schema: REPORT_SCHEMA,
                strategy: cols[0].to_string(),
                video: cols[1].to_string(),
                tem_con_adjacent: num(6)?,
                tem_con_allpairs: num(7)?,
                edit_err: num(8)?,
                bg_err: num(9)?,
                frames: Vec::new(),
            });
            r.frames.push(FrameMetrics {
                frame: int(2)? as usize,
                flops: int(3)?,
                state_size: int(4)? as usize,
                seconds: num(5)?,
            });
        }
        report.ok_or_else(|| bad(1, "no rows"))
    }

    pub fn to_json(&self) -> Result<String> {
        self.check_finite()?;
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// The recoloring target used for a source prompt: the next palette entry.
pub fn edit_target(source_prompt: usize) -> usize {
    source_prompt % PALETTE.len() + 1
}

/// Edited frames of one streamed video plus its report.
pub struct StreamRun {
    pub frames: Vec<Tensor>,
    pub report: MetricsReport,
}

/// Streams `video` through a fresh session that recolors it to `target` and
/// scores the output. Features come from the frozen base stack of `model`.
pub fn evaluate_stream(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    guidance: &GuidanceConfig,
    video: &LabeledVideo,
    name: &str,
    target: usize,
    strategy: Strategy,
    options: SessionOptions,
) -> Result<StreamRun> {
    let mut session = open_session(model, schedule, guidance, target, strategy, options)?;
    let mut results = Vec::with_capacity(video.len());
    let mut sizes = Vec::with_capacity(video.len());
    for frame in &video.frames {
        results.push(session.process_frame(frame)?);
        sizes.push(measure_state_size(&session));
    }
    let frames: Vec<Tensor> = results.iter().map(|r| r.frame.clone()).collect();
    let p = model.bind();
    let (adj, all) = temporal_consistency(&frames, |f| Ok(model.features(&p, f)?.to_vec()))?;
    let (edit_err, bg_err) =
        edit_accuracy(&frames, &video.frames, &video.masks, prompt_color(target)?)?;
    let report = MetricsReport {
        schema: REPORT_SCHEMA,
        strategy: strategy.to_string(),
        video: name.to_string(),
        tem_con_adjacent: adj,
        tem_con_allpairs: all,
        edit_err,
        bg_err,
        frames: MetricsReport::frame_rows(&results, &sizes),
    };
    Ok(StreamRun { frames, report })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

pub fn emit_report(
    report: &MetricsReport,
    path: impl AsRef<Path>,
    format: ReportFormat,
) -> Result<()> {
    let text = match format {
        ReportFormat::Json => report.to_json()?,
        ReportFormat::Csv => report.to_csv()?,
    };
    std::fs::write(path, text)?;
    Ok(())
}

pub const COMPARISON_HEADER: &str =
    "strategy,video,tem_con,edit_err,flops_per_frame,state_size,s_per_frame";

/// One row per report, mirroring a strategy comparison table.
pub fn comparison_csv(reports: &[MetricsReport]) -> Result<String> {
    let mut out = format!("{COMPARISON_HEADER}\n");
    for r in reports {
        r.check_finite()?;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.strategy,
            r.video,
            r.tem_con_adjacent,
            r.edit_err,
            r.mean_flops(),
            r.max_state_size(),
            r.mean_seconds()
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video::{generate_video, ShapeKind, VideoSpec, PALETTE};
    use proptest::prelude::*;

    fn feat(v: Vec<f32>) -> Tensor {
        Tensor::from_vec(v)
    }

    fn raw(t: &Tensor) -> Result<Vec<f32>> {
        Ok(t.to_vec())
    }

    #[test]
    fn identical_and_antipodal_frames() {
        let a = feat(vec![1.0, -2.0, 0.5]);
        assert_eq!(
            temporal_consistency(&[a.clone(), a.clone(), a.clone()], raw).unwrap(),
            (1.0, 1.0)
        );
        let (adj, _) = temporal_consistency(&[a.clone(), a.scale(-1.0).unwrap()], raw).unwrap();
        assert_eq!(adj, -1.0);
        assert!(temporal_consistency(&[a], raw).is_err());
    }

    #[test]
    fn hand_computed_pairwise_means() {
        let fs = [
            feat(vec![1.0, 0.0]),
            feat(vec![1.0, 1.0]),
            feat(vec![0.0, 1.0]),
        ];
        let r = 0.5f64.sqrt();
        let (adj, all) = temporal_consistency(&fs, raw).unwrap();
        assert!((adj - r).abs() < 1e-6);
        assert!((all - (2.0 * r + 0.0) / 3.0).abs() < 1e-6);
    }

    fn video(prompt: usize) -> crate::video::LabeledVideo {
        let spec = VideoSpec {
            frames: 4,
            image_size: 16,
            shape: ShapeKind::Disk,
            radius: 4.0,
            start: [8.0, 8.0],
            velocity: [1.0, 0.5],
            prompt,
            noise_sigma: 0.0,
            seed: 0,
        };
        generate_video(&spec).unwrap()
    }

    #[test]
    fn untouched_source_has_closed_form_error() {
        let v = video(1);
        let target = PALETTE[3];
        let (edit, bg) = edit_accuracy(&v.frames, &v.frames, &v.masks, target).unwrap();
        let c = v.spec.color().unwrap();
        let expect = (0..3)
            .map(|i| (c[i] as f64 - target[i] as f64).abs())
            .sum::<f64>()
            / 3.0;
        assert!((edit - expect).abs() < 1e-6, "{edit} vs {expect}");
        assert_eq!(bg, 0.0);
    }

    #[test]
    fn painted_frames_have_zero_error() {
        let v = video(1);
        let target = PALETTE[3];
        let painted: Vec<Tensor> = v
            .frames
            .iter()
            .zip(&v.masks)
            .map(|(f, m)| {
                let hw = m.numel();
                let mut d = f.to_vec();
                for (px, &mv) in m.data().iter().enumerate() {
                    if mv > 0.5 {
                        (0..3).for_each(|c| d[c * hw + px] = target[c]);
                    }
                }
                Tensor::new(f.shape().to_vec(), d).unwrap()
            })
            .collect();
        let (edit, bg) = edit_accuracy(&painted, &v.frames, &v.masks, target).unwrap();
        assert!(edit < 1e-6);
        assert_eq!(bg, 0.0);
        assert!(edit_accuracy(&painted[..2], &v.frames, &v.masks, target).is_err());
    }

    #[test]
    fn flop_counts() {
        let a = Tensor::full(&[2, 2], 1.0);
        let (_, n) = count_flops(|| a.matmul(&a).unwrap());
        assert_eq!(n, 16);
        assert_eq!(count_flops(|| ()).1, 0);
        let mut c = FlopCounter::new();
        c.count(|| a.matmul(&a).unwrap());
        c.count(|| a.add(&a).unwrap());
        let (_, both) = count_flops(|| {
            a.matmul(&a).unwrap();
            a.add(&a).unwrap();
        });
        assert_eq!(c.per_frame, vec![16, 4]);
        assert_eq!(c.total(), both);
    }

    fn report(frames: usize) -> MetricsReport {
        MetricsReport {
            schema: REPORT_SCHEMA,
            strategy: "svdiff".into(),
            video: "video_0003".into(),
            tem_con_adjacent: 0.91234567,
            tem_con_allpairs: 0.8,
            edit_err: 0.125,
            bg_err: 1.0 / 3.0,
            frames: (0..frames)
                .map(|i| FrameMetrics {
                    frame: i,
                    flops: 1000 + i as u64,
                    state_size: 147456,
                    seconds: 0.1 * i as f64,
                })
                .collect(),
        }
    }

    #[test]
    fn reports_round_trip_and_reject_nan() {
        let dir = tempfile::tempdir().unwrap();
        let r = report(5);
        let json = dir.path().join("r.json");
        let csv = dir.path().join("r.csv");
        emit_report(&r, &json, ReportFormat::Json).unwrap();
        emit_report(&r, &csv, ReportFormat::Csv).unwrap();
        let back: MetricsReport =
            serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
        assert_eq!(back, r);
        let text = std::fs::read_to_string(&csv).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert_eq!(MetricsReport::from_csv(&text).unwrap(), r);
        let nan = MetricsReport {
            edit_err: f64::NAN,
            ..r
        };
        assert!(matches!(
            emit_report(&nan, &json, ReportFormat::Json),
            Err(Error::NonFinite(_))
        ));
        assert!(comparison_csv(&[nan]).is_err());
    }

    proptest! {
        #[test]
        fn similarities_stay_in_range(v in proptest::collection::vec(proptest::collection::vec(-5.0f32..5.0, 4), 2..6)) {
            let fs: Vec<Tensor> = v.into_iter().map(feat).collect();
            let (a, b) = temporal_consistency(&fs, raw).unwrap();
            prop_assert!((-1.0..=1.0).contains(&a) && (-1.0..=1.0).contains(&b));
        }

        #[test]
        fn errors_are_non_negative(seed in 0u64..1000, target in 0usize..6) {
            let seeds = crate::SeedTree::new(seed);
            let v = crate::video::generate_video(&VideoSpec::random(&seeds, 0, 3, 16)).unwrap();
            let noisy: Vec<Tensor> = v.frames.iter().map(|f| f.map(|x| x * 0.5 + 0.1)).collect();
            let (e, b) = edit_accuracy(&noisy, &v.frames, &v.masks, PALETTE[target]).unwrap();
            prop_assert!(e >= 0.0 && b >= 0.0);
        }
    }
}
