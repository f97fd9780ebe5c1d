use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use roadact_core::align::{dynamic_roi_align, keyframe_align, FastFrameMap, RoiAlignSpec, TwoRateFeatures};
use roadact_core::env_model::{handle_pedestrian, ActionHistoryEntry, ConflictDecisionSpec};
use roadact_core::eval::{frame_map, video_map, FrameGroundTruth, FramePrediction, FRAME_IOU, TUBE_IOU};
use roadact_core::fusion::{flow_to_colorwheel, fuse_fpn, generate_pseudo_labels, FeaturePyramid, PseudoLabelRule};
use roadact_core::interaction::{
    accuracy, predict, toy_interaction_dataset, train_toy, ClassifierShape, ClassifierWeights, ClipSample,
    ForwardOptions, TrainConfig,
};
use roadact_core::io::{load_jsonl, save_jsonl};
use roadact_core::model::{action, agent_class};
use roadact_core::pipeline::run_pipeline;
use roadact_core::postprocess::{time_sync, trim_tube, ActionTrack, ScoredTube};
use roadact_core::scenario::{generate, Scenario};
use roadact_core::tensor::{read_sections, write_sections};
use roadact_core::tracker::TrackerState;
use roadact_core::{
    ActionScores, BoundingBox, Detection, FeatureTensor, FlowField, PipelineConfig, TrackedDetection, Tubelet,
};

/// Road-agent action detection toolkit.
#[derive(Parser)]
#[command(name = "roadact", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlignMode {
    Key,
    Droi,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMode {
    Frame,
    Video,
}

#[derive(Subcommand)]
enum Command {
    /// Sum an RGB and a flow pyramid level by level (sections file in, sections file out).
    Fuse {
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode a flow tensor (1 x 2 x H x W) as a colour-wheel RGB tensor.
    Flowviz {
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Relabel confident detections that overlap no annotation as inactive agents.
    Pseudolabel {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Track detections over frames and write one tubelet per track.
    Track {
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Align tubes onto slow/fast feature stacks.
    Align {
        /// `slow.bin,fast.bin`, each a single T x C x H x W tensor.
        #[arg(long, value_delimiter = ',', required = true)]
        features: Vec<PathBuf>,
        #[arg(long)]
        tubes: PathBuf,
        #[arg(long, value_enum, default_value = "droi")]
        mode: AlignMode,
        /// Absolute frame index of the first fast slice.
        #[arg(long, default_value_t = 0)]
        first_frame: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score aligned agent features, one clip per file.
    Classify {
        #[arg(long, num_args = 1.., required = true)]
        features: Vec<PathBuf>,
        #[arg(long)]
        weights: PathBuf,
        /// Clip context tensor; zeros when omitted.
        #[arg(long)]
        context: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the interaction classifier on a directory of clip files.
    TrainToy {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic two-agent interaction dataset as clip files.
    ToyData {
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split scored tubes into per-action tracks.
    Trim {
        #[arg(long)]
        scored_tubes: PathBuf,
        #[arg(long, default_value_t = 0.001)]
        epsilon: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pick the nearest detection for each frame timestamp.
    Sync {
        /// One timestamp per line, most recent first.
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        dets: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decide whether a pedestrian's recent actions suppress a conflict.
    Conflict {
        #[arg(long)]
        history: PathBuf,
        #[arg(long)]
        now: f64,
        #[arg(long, value_delimiter = ',', default_value = "Stop,Wait2X")]
        int_set: Vec<String>,
        #[arg(long, default_value_t = 5.0)]
        window: f64,
    },
    /// Render a scenario: frames, flows, ground truth and raw detections.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Frame- or video-level mean average precision.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value = "frame")]
        mode: EvalMode,
        #[arg(long)]
        iou: Option<f64>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// End-to-end run on a scenario file.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(PipelineConfig::default()),
    }
}

fn read_sections_file(path: &Path) -> Result<Vec<(String, FeatureTensor)>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_sections(BufReader::new(file))?)
}

fn write_sections_file(path: &Path, sections: &[(String, FeatureTensor)]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_sections(BufWriter::new(file), sections.iter().map(|(n, t)| (n.as_str(), t)))?;
    Ok(())
}

fn read_pyramid(path: &Path) -> Result<FeaturePyramid> {
    let levels = read_sections_file(path)?.into_iter().map(|(_, t)| t).collect();
    Ok(FeaturePyramid::new(levels)?)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value)?;
    Ok(())
}

fn by_frame(dets: Vec<Detection>) -> BTreeMap<usize, Vec<Detection>> {
    let mut frames: BTreeMap<usize, Vec<Detection>> = BTreeMap::new();
    for d in dets {
        frames.entry(d.frame_index).or_default().push(d);
    }
    frames
}

/// The tube's boxes at absolute frames `first..first + len`.
fn clip_window(tube: &Tubelet, first: usize, len: usize) -> Result<Tubelet> {
    let boxes: Vec<Option<BoundingBox>> = (first..first + len).map(|f| tube.box_at(f).copied()).collect();
    Ok(Tubelet::new(tube.track_id, tube.class_id, 0, boxes)?)
}

fn track_id_of(name: &str, fallback: usize) -> u64 {
    name.strip_prefix("track").and_then(|s| s.parse().ok()).unwrap_or(fallback as u64)
}

fn clip_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "bin"));
    files.sort();
    Ok(files)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Fuse { rgb, flow, out } => {
            let fused = fuse_fpn(&read_pyramid(&rgb)?, &read_pyramid(&flow)?)?;
            let levels: Vec<(String, FeatureTensor)> =
                fused.into_levels().into_iter().enumerate().map(|(k, t)| (format!("level{k}"), t)).collect();
            write_sections_file(&out, &levels)?;
        }
        Command::Flowviz { flow, out } => {
            flow_to_colorwheel(&FlowField::load(&flow)?).save(&out)?;
        }
        Command::Pseudolabel { dets, gt, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let rule = PseudoLabelRule::new(cfg.pseudo_conf_threshold, cfg.pseudo_iou_threshold, agent_class::INACTIVE)?;
            let gt = by_frame(load_jsonl(&gt)?);
            let mut labels = Vec::new();
            for (frame, frame_dets) in by_frame(load_jsonl(&dets)?) {
                let annotated = gt.get(&frame).map(Vec::as_slice).unwrap_or(&[]);
                labels.extend(generate_pseudo_labels(&frame_dets, annotated, &rule));
            }
            save_jsonl(&out, &labels)?;
            println!("{} pseudo-labels", labels.len());
        }
        Command::Track { dets, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let frames = by_frame(load_jsonl(&dets)?);
            let mut tracker = TrackerState::from_config(&cfg);
            let last = frames.keys().next_back().copied().unwrap_or(0);
            for f in 0..=last {
                tracker.step(frames.get(&f).map(Vec::as_slice).unwrap_or(&[]), f)?;
            }
            let tubes = tracker.lifetime_tubelets();
            save_jsonl(&out, &tubes)?;
            println!("{} tracks", tubes.len());
        }
        Command::Align { features, tubes, mode, first_frame, config, out } => {
            let [slow, fast] = features.as_slice() else { bail!("--features takes exactly slow.bin,fast.bin") };
            let cfg = load_config(config.as_deref())?;
            let spec = RoiAlignSpec::new(cfg.roi_out, cfg.roi_out, cfg.roi_samples, cfg.roi_offset)?;
            let feats = TwoRateFeatures::new(FeatureTensor::load(slow)?, FeatureTensor::load(fast)?)?;
            let len = feats.fast().t();
            let mut aligned = Vec::new();
            for tube in load_jsonl::<Tubelet>(&tubes)? {
                let clip = clip_window(&tube, first_frame, len)?;
                let roi = match mode {
                    AlignMode::Droi => dynamic_roi_align(&feats, &clip, FastFrameMap::identity(), &spec),
                    AlignMode::Key => match clip.box_at(len / 2) {
                        Some(b) => keyframe_align(&feats, b, &spec),
                        None => {
                            eprintln!("track {}: no box at the key frame, skipped", tube.track_id);
                            continue;
                        }
                    },
                };
                match roi {
                    Ok(r) => aligned.push((format!("track{}", tube.track_id), r)),
                    Err(e) => eprintln!("track {}: {e}, skipped", tube.track_id),
                }
            }
            write_sections_file(&out, &aligned)?;
            println!("{} aligned tubes", aligned.len());
        }
        Command::Classify { features, weights, context, out } => {
            let w = ClassifierWeights::load(&weights)?;
            let s = w.shape;
            let context = match context {
                Some(p) => FeatureTensor::load(&p)?,
                None => FeatureTensor::zeros([1, s.context_channels, s.out_h, s.out_w]),
            };
            let mut scores = Vec::new();
            for (key, path) in features.iter().enumerate() {
                let sections = read_sections_file(path)?;
                if sections.is_empty() {
                    continue;
                }
                let ids: Vec<u64> = sections.iter().enumerate().map(|(i, (n, _))| track_id_of(n, i)).collect();
                let sample = ClipSample {
                    rois: sections.into_iter().map(|(_, t)| t).collect(),
                    context: context.clone(),
                    targets: Vec::new(),
                };
                for (id, sc) in ids.into_iter().zip(predict(&w, &sample, &ForwardOptions::default())?) {
                    scores.push(ActionScores::new(id, key, sc)?);
                }
            }
            save_jsonl(&out, &scores)?;
        }
        Command::TrainToy { data, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let clips = clip_files(&data)?
                .iter()
                .map(ClipSample::load)
                .collect::<roadact_core::Result<Vec<_>>>()?;
            let Some(first) = clips.first() else { bail!("no clip files in {}", data.display()) };
            let (Some(roi), Some(targets)) = (first.rois.first(), first.targets.first()) else {
                bail!("first clip has no labelled agents")
            };
            let shape = ClassifierShape {
                roi_channels: roi.c(),
                context_channels: first.context.c(),
                channels: cfg.feature_channels,
                attention_dim: if cfg.attention_dim == 0 { cfg.feature_channels } else { cfg.attention_dim },
                depth: cfg.interaction_depth,
                n_actions: targets.len(),
                out_h: roi.h(),
                out_w: roi.w(),
            };
            let init = ClassifierWeights::init(shape, cfg.layer_norm_eps, cfg.norm_gain, cfg.norm_bias, cfg.train_seed)?;
            let tc = TrainConfig::from(&cfg);
            let (w, report) = train_toy(init, &clips, &tc)?;
            w.save(&out)?;
            let acc = accuracy(&w, &clips, &ForwardOptions::default())?;
            println!(
                "{} clips, loss {:.4e} -> {:.4e}, training accuracy {acc:.3}",
                clips.len(),
                report.initial_loss,
                report.epoch_losses.last().copied().unwrap_or(report.initial_loss)
            );
        }
        Command::ToyData { n, seed, out } => {
            std::fs::create_dir_all(&out)?;
            for (i, clip) in toy_interaction_dataset(n, seed).iter().enumerate() {
                clip.save(out.join(format!("clip_{i:05}.bin")))?;
            }
        }
        Command::Trim { scored_tubes, epsilon, out } => {
            let mut tracks: Vec<ActionTrack> = Vec::new();
            for tube in load_jsonl::<ScoredTube>(&scored_tubes)? {
                tube.validate()?;
                let n_actions = tube.scores.first().map_or(0, Vec::len);
                for a in 0..n_actions {
                    tracks.extend(trim_tube(&tube, a as u32, epsilon)?);
                }
            }
            save_jsonl(&out, &tracks)?;
            println!("{} action tracks", tracks.len());
        }
        Command::Sync { frames, dets, out } => {
            let file = File::open(&frames).with_context(|| format!("opening {}", frames.display()))?;
            let mut stamps = Vec::new();
            for line in BufReader::new(file).lines() {
                let line = line?;
                let line = line.trim();
                if !line.is_empty() {
                    stamps.push(line.parse::<f64>().with_context(|| format!("bad timestamp `{line}`"))?);
                }
            }
            let dets: Vec<TrackedDetection> = load_jsonl(&dets)?;
            save_jsonl(&out, &time_sync(&stamps, &dets)?)?;
        }
        Command::Conflict { history, now, int_set, window } => {
            let interference_set = int_set
                .iter()
                .map(|s| action::parse(s).with_context(|| format!("unknown action `{s}`")))
                .collect::<Result<BTreeSet<_>>>()?;
            let spec = ConflictDecisionSpec::new(interference_set, window)?;
            let history: Vec<ActionHistoryEntry> = load_jsonl(&history)?;
            println!("{}", handle_pedestrian(&history, now, &spec));
        }
        Command::Simulate { scenario, out } => {
            let s = Scenario::load(&scenario)?;
            let g = generate(&s)?;
            std::fs::create_dir_all(&out)?;
            let frames: Vec<(String, FeatureTensor)> =
                g.frames.iter().enumerate().map(|(t, f)| (format!("frame{t}"), f.clone())).collect();
            write_sections_file(&out.join("frames.bin"), &frames)?;
            let flows: Vec<(String, FeatureTensor)> =
                g.flows.iter().enumerate().map(|(t, f)| (format!("flow{}", t + 1), f.to_tensor())).collect();
            write_sections_file(&out.join("flows.bin"), &flows)?;
            save_jsonl(out.join("ground_truth.jsonl"), &g.ground_truth)?;
            save_jsonl(out.join("gt_tracks.jsonl"), &g.gt_tracks)?;
            let dets: Vec<Detection> = g.detections.into_iter().flatten().collect();
            save_jsonl(out.join("detections.jsonl"), &dets)?;
            println!("{} frames, {} ground-truth boxes, {} detections", g.frames.len(), g.ground_truth.len(), dets.len());
        }
        Command::Eval { pred, gt, mode, iou, report } => {
            let r = match mode {
                EvalMode::Frame => frame_map(
                    &load_jsonl::<FramePrediction>(&pred)?,
                    &load_jsonl::<FrameGroundTruth>(&gt)?,
                    iou.unwrap_or(FRAME_IOU),
                ),
                EvalMode::Video => video_map(
                    &load_jsonl::<ActionTrack>(&pred)?,
                    &load_jsonl::<ActionTrack>(&gt)?,
                    iou.unwrap_or(TUBE_IOU),
                ),
            };
            for c in &r.classes {
                println!("{:<8} AP {:.4} ({} gt, {} predictions)", c.name, c.ap, c.ground_truth, c.predictions);
            }
            match r.mean_ap {
                Some(m) => println!("{}-mAP {m:.4}", r.mode),
                None => println!("{}-mAP undefined (no ground truth)", r.mode),
            }
            if let Some(path) = report {
                write_json(&path, &r)?;
            }
        }
        Command::Run { scenario, config, report } => {
            let cfg = load_config(config.as_deref())?;
            let s = Scenario::load(&scenario)?;
            let outcome = run_pipeline(&s, &cfg)?;
            let fmt = |m: Option<f64>| m.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            println!(
                "{} tracks, frame-mAP {}, video-mAP {}",
                outcome.tracks,
                fmt(outcome.frame_report.mean_ap),
                fmt(outcome.video_report.mean_ap)
            );
            if let Some(path) = report {
                write_json(&path, &outcome)?;
            }
        }
    }
    std::io::stdout().flush()?;
    Ok(())
}
