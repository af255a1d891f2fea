//! End-to-end runs: staged training, test-set evaluation and the
//! injection-site ablation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::eval::{self, Detection, GroundTruth, MetricReport, ScoredPrediction};
use crate::network::{self, foreground_scores, ImageFeatures, InjectionSite, NetworkParams};
use crate::synth::{self, EventLabel, ProposalConfig, ProposalMode, Sample};
use crate::trainer::{self, StageConfig, TrainingSet};

const IOU_THRESHOLD: f64 = 0.5;

/// Fusion weights for (event, rigid, non-rigid) scores.
pub const FUSION_WEIGHTS: [f64; 3] = [0.5, 0.25, 0.25];

/// Independent rng streams derived from the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    Proposals = 1,
    Stage1 = 2,
    Stage2 = 3,
    Stage3 = 4,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Batch-sampling stream of a training stage.
pub fn stage_rng(seed: u64, stage: u8) -> ChaCha8Rng {
    let stream = match stage {
        1 => Stream::Stage1,
        2 => Stream::Stage2,
        _ => Stream::Stage3,
    };
    stream_rng(seed, stream)
}

/// Freshly initialized network without injection, ready for stage 1.
pub fn initial_params(cfg: &TrainConfig) -> Result<NetworkParams> {
    let arch = cfg.arch.with_injection(InjectionSite::None);
    network::build(&arch, stream_rng(cfg.seed, Stream::Init).random())
}

/// Stage-3 state shared by every injection site: frozen stage-2 weights and
/// the event-head inputs they produce for each training image.
pub struct Stage3Inputs<'a> {
    pub set: TrainingSet<'a>,
    pub stage2: NetworkParams,
    pub cache: Vec<ImageFeatures>,
}

pub fn training_set<'a>(cfg: &TrainConfig, train: &'a [Sample]) -> Result<TrainingSet<'a>> {
    TrainingSet::new(
        train,
        &cfg.arch,
        cfg.jitter_per_box,
        &mut stream_rng(cfg.seed, Stream::Proposals),
    )
}

/// Runs stages 1 and 2 from a fresh network.
pub fn train_stages_1_2(
    cfg: &TrainConfig,
    set: &TrainingSet,
) -> Result<(NetworkParams, NetworkParams)> {
    let params = initial_params(cfg)?;
    let s1 = trainer::run_stage(
        &StageConfig::from_config(cfg, 1, InjectionSite::None)?,
        params,
        set,
        cfg,
        &mut stage_rng(cfg.seed, 1),
    )?;
    let s2 = trainer::run_stage(
        &StageConfig::from_config(cfg, 2, InjectionSite::None)?,
        s1.params.clone(),
        set,
        cfg,
        &mut stage_rng(cfg.seed, 2),
    )?;
    Ok((s1.params, s2.params))
}

pub fn stage3_inputs<'a>(stage2: NetworkParams, set: TrainingSet<'a>) -> Result<Stage3Inputs<'a>> {
    let cache = trainer::feature_cache(&stage2, &set)?;
    Ok(Stage3Inputs { set, stage2, cache })
}

/// Stage 3 for one injection site. Every site sees the same batch sequence.
pub fn train_stage3(
    cfg: &TrainConfig,
    inputs: &Stage3Inputs,
    site: InjectionSite,
) -> Result<NetworkParams> {
    let stage = StageConfig::from_config(cfg, 3, site)?;
    let out = trainer::run_stage3_cached(
        &stage,
        &inputs.stage2,
        &inputs.set,
        &inputs.cache,
        cfg,
        &mut stage_rng(cfg.seed, 3),
    )?;
    Ok(out.params)
}

/// Shared-layer and detection outputs for each image, using test-time
/// proposals.
pub fn split_features(params: &NetworkParams, samples: &[Sample]) -> Result<Vec<ImageFeatures>> {
    let pcfg = ProposalConfig::default();
    samples
        .iter()
        .map(|s| {
            let rigid = synth::propose_rois(&s.image, ProposalMode::Rigid, &pcfg);
            let nonrigid = synth::propose_rois(&s.image, ProposalMode::NonRigid, &pcfg);
            network::image_features(&s.image, params, &rigid, &nonrigid)
        })
        .collect()
}

/// Probability of the malicious event for each image.
pub fn event_scores(params: &NetworkParams, features: &[ImageFeatures]) -> Result<Vec<f64>> {
    let malicious = EventLabel::Malicious.index();
    features
        .iter()
        .map(|f| Ok(network::event_probs_from_features(params, f)?.data()[malicious]))
        .collect()
}

pub fn event_ap(scores: &[f64], samples: &[Sample]) -> Result<f64> {
    if scores.len() != samples.len() {
        return Err(Error::shape(
            "event_ap",
            format!("{} scores for {} images", scores.len(), samples.len()),
        ));
    }
    let preds: Vec<ScoredPrediction> = scores
        .iter()
        .zip(samples)
        .map(|(&score, s)| ScoredPrediction {
            score,
            is_positive: s.annotation.event == EventLabel::Malicious,
        })
        .collect();
    eval::average_precision(&preds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DetectionTask {
    Rigid,
    NonRigid,
}

/// Every (proposal, foreground class) pair as a scored detection, with the
/// matching ground truth.
pub fn detections(
    features: &[ImageFeatures],
    samples: &[Sample],
    task: DetectionTask,
) -> (Vec<Detection>, Vec<GroundTruth>) {
    let pcfg = ProposalConfig::default();
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for (image, (f, s)) in features.iter().zip(samples).enumerate() {
        let (probs, boxes, objects) = match task {
            DetectionTask::Rigid => (
                &f.rigid_probs,
                synth::propose_rois(&s.image, ProposalMode::Rigid, &pcfg),
                &s.annotation.rigid,
            ),
            DetectionTask::NonRigid => (
                &f.nonrigid_probs,
                synth::propose_rois(&s.image, ProposalMode::NonRigid, &pcfg),
                &s.annotation.nonrigid,
            ),
        };
        let k = probs.shape()[1];
        for (row, bbox) in probs.data().chunks_exact(k).zip(boxes) {
            for (cls, &score) in row[1..].iter().enumerate() {
                dets.push(Detection {
                    image,
                    bbox,
                    cls,
                    score,
                });
            }
        }
        gts.extend(objects.iter().map(|o| GroundTruth {
            image,
            bbox: o.bbox,
            cls: o.cls,
        }));
    }
    (dets, gts)
}

pub fn detection_map(
    features: &[ImageFeatures],
    samples: &[Sample],
    task: DetectionTask,
) -> Result<f64> {
    let (dets, gts) = detections(features, samples, task);
    let classes = match task {
        DetectionTask::Rigid => synth::NUM_RIGID_CLASSES,
        DetectionTask::NonRigid => synth::NUM_NONRIGID_CLASSES,
    };
    eval::mean_detection_ap(&dets, &gts, IOU_THRESHOLD, classes)
}

/// Per-image score of a detection task: the highest foreground probability
/// over its proposals.
pub fn image_detection_scores(features: &[ImageFeatures], task: DetectionTask) -> Vec<f64> {
    features
        .iter()
        .map(|f| {
            let probs = match task {
                DetectionTask::Rigid => &f.rigid_probs,
                DetectionTask::NonRigid => &f.nonrigid_probs,
            };
            foreground_scores(probs)
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Event AP after late fusion with both detection tasks.
pub fn fused_event_ap(
    event: &[f64],
    features: &[ImageFeatures],
    samples: &[Sample],
) -> Result<f64> {
    let fused = eval::late_fusion(
        &[
            event.to_vec(),
            image_detection_scores(features, DetectionTask::Rigid),
            image_detection_scores(features, DetectionTask::NonRigid),
        ],
        &FUSION_WEIGHTS,
    )?;
    event_ap(&fused.scores, samples)
}

/// Event, detection and fused metrics of one checkpoint on one split.
pub fn evaluate(
    params: &NetworkParams,
    samples: &[Sample],
    split: &str,
    fusion: bool,
) -> Result<Vec<MetricReport>> {
    let features = split_features(params, samples)?;
    evaluate_with_features(params, &features, samples, split, fusion)
}

pub fn evaluate_with_features(
    params: &NetworkParams,
    features: &[ImageFeatures],
    samples: &[Sample],
    split: &str,
    fusion: bool,
) -> Result<Vec<MetricReport>> {
    let hash = format!("{:016x}", params.config.hash());
    let report = |task: &str, ap: f64, num_pos: usize| MetricReport {
        task: task.to_string(),
        split: split.to_string(),
        ap,
        num_pos,
        num_images: samples.len(),
        config_hash: hash.clone(),
    };
    let malicious = samples
        .iter()
        .filter(|s| s.annotation.event == EventLabel::Malicious)
        .count();
    let scores = event_scores(params, features)?;
    let mut out = vec![report("event", event_ap(&scores, samples)?, malicious)];
    for (name, task) in [
        ("rigid", DetectionTask::Rigid),
        ("nonrigid", DetectionTask::NonRigid),
    ] {
        let ap = detection_map(features, samples, task)?;
        let num_pos = samples
            .iter()
            .map(|s| match task {
                DetectionTask::Rigid => s.annotation.rigid.len(),
                DetectionTask::NonRigid => s.annotation.nonrigid.len(),
            })
            .sum();
        out.push(report(name, ap, num_pos));
    }
    if fusion {
        out.push(report(
            "event_fused",
            fused_event_ap(&scores, features, samples)?,
            malicious,
        ));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub injection: InjectionSite,
    pub event_ap: f64,
    pub event_fused_ap: f64,
    pub rigid_ap: f64,
    pub nonrigid_ap: f64,
    pub config_hash: String,
}

/// Trains stages 1-2 once, then stage 3 per site from the shared stage-2
/// weights, and scores every variant on the same test features.
pub fn ablate(
    cfg: &TrainConfig,
    train: &[Sample],
    test: &[Sample],
    sites: &[InjectionSite],
) -> Result<Vec<AblationRow>> {
    let set = training_set(cfg, train)?;
    let (_, stage2) = train_stages_1_2(cfg, &set)?;
    let inputs = stage3_inputs(stage2, set)?;
    let features = split_features(&inputs.stage2, test)?;
    let rigid_ap = detection_map(&features, test, DetectionTask::Rigid)?;
    let nonrigid_ap = detection_map(&features, test, DetectionTask::NonRigid)?;
    let mut rows = Vec::with_capacity(sites.len());
    for &site in sites {
        let params = train_stage3(cfg, &inputs, site)?;
        let scores = event_scores(&params, &features)?;
        rows.push(AblationRow {
            injection: site,
            event_ap: event_ap(&scores, test)?,
            event_fused_ap: fused_event_ap(&scores, &features, test)?,
            rigid_ap,
            nonrigid_ap,
            config_hash: format!("{:016x}", params.config.hash()),
        });
        log::info!(
            "ablation {}: event AP {:.4}",
            site,
            rows.last().unwrap().event_ap
        );
    }
    Ok(rows)
}
