//! Three-stage training: rigid detection alone, then all tasks jointly
//! without injection, then the event head alone with detection maps
//! injected and everything else frozen.

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::detection::BBox;
use crate::error::{Error, Result};
use crate::network::{
    self, detection_head, event_head, event_logits_from_features, ArchConfig, Bound, Branch,
    ImageFeatures, InjectedNodes, InjectionSite, NetworkParams, EVENT, NONRIGID, RIGID, SHARED,
};
use crate::optim::{lr_schedule, GradMap, Sgd};
use crate::synth::{self, EventLabel, Object, ProposalConfig, Sample};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub stage_id: u8,
    pub lr: f64,
    pub iterations: usize,
    pub step_size: usize,
    pub gamma: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub trainable_groups: Vec<&'static str>,
    /// Site used by the event head; only stage 3 may inject.
    pub injection_site: InjectionSite,
}

impl StageConfig {
    /// Stage settings from a training config. `injection_site` applies to
    /// stage 3 only.
    pub fn from_config(
        cfg: &TrainConfig,
        stage_id: u8,
        injection_site: InjectionSite,
    ) -> Result<Self> {
        let (trainable, site): (Vec<&'static str>, _) = match stage_id {
            1 => (vec![SHARED, RIGID], InjectionSite::None),
            2 => (vec![SHARED, RIGID, NONRIGID, EVENT], InjectionSite::None),
            3 => (vec![EVENT], injection_site),
            _ => {
                return Err(Error::invalid(
                    "stage_config",
                    format!("stage must be 1, 2 or 3, got {}", stage_id),
                ))
            }
        };
        let sched = cfg.stages[stage_id as usize - 1];
        let stage = StageConfig {
            stage_id,
            lr: sched.lr,
            iterations: sched.iters,
            step_size: sched.step,
            gamma: cfg.gamma,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            trainable_groups: trainable,
            injection_site: site,
        };
        stage.validate()?;
        Ok(stage)
    }

    pub fn injection_enabled(&self) -> bool {
        self.injection_site.is_enabled()
    }

    pub fn validate(&self) -> Result<()> {
        let expected: &[&str] = match self.stage_id {
            1 => &[SHARED, RIGID],
            2 => &[SHARED, RIGID, NONRIGID, EVENT],
            3 => &[EVENT],
            s => {
                return Err(Error::invalid(
                    "stage_config",
                    format!("stage must be 1, 2 or 3, got {}", s),
                ))
            }
        };
        let mut groups = self.trainable_groups.clone();
        groups.sort_unstable();
        let mut want = expected.to_vec();
        want.sort_unstable();
        if groups != want {
            return Err(Error::invalid(
                "stage_config",
                format!(
                    "stage {} trains {:?}, not {:?}",
                    self.stage_id, expected, self.trainable_groups
                ),
            ));
        }
        if self.stage_id != 3 && self.injection_enabled() {
            return Err(Error::invalid(
                "stage_config",
                format!("stage {} cannot inject detection maps", self.stage_id),
            ));
        }
        if self.step_size == 0 || self.step_size > self.iterations.max(1) {
            return Err(Error::invalid(
                "stage_config",
                format!(
                    "step size {} must be in 1..={}",
                    self.step_size,
                    self.iterations.max(1)
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Rigid,
    NonRigid,
}

/// Training target of one proposal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoiLabel {
    Background,
    /// Foreground class, 0-based.
    Class(usize),
    /// Excluded from the loss.
    Ignore,
}

impl RoiLabel {
    /// Head output index (background is 0), or `None` when ignored.
    pub fn target(self) -> Option<usize> {
        match self {
            RoiLabel::Background => Some(0),
            RoiLabel::Class(c) => Some(c + 1),
            RoiLabel::Ignore => None,
        }
    }
}

const RIGID_POSITIVE_IOU: f64 = 0.5;
const RIGID_NEGATIVE_IOU: f64 = 0.1;
const NONRIGID_POSITIVE_IOU: f64 = 0.1;

/// Labels proposals by their best-overlapping ground-truth box.
///
/// Rigid: positive above IoU 0.5, background below 0.1, ignored between.
/// Non-rigid: positive above 0.1, background otherwise.
pub fn label_rois(proposals: &[BBox], gt: &[Object], task: Task) -> Vec<RoiLabel> {
    proposals
        .iter()
        .map(|p| {
            let mut best = (0.0, None);
            for o in gt {
                let v = p.iou(&o.bbox);
                if v > best.0 {
                    best = (v, Some(o.cls));
                }
            }
            match (task, best) {
                (Task::Rigid, (v, Some(c))) if v > RIGID_POSITIVE_IOU => RoiLabel::Class(c),
                (Task::Rigid, (v, _)) if v < RIGID_NEGATIVE_IOU => RoiLabel::Background,
                (Task::Rigid, _) => RoiLabel::Ignore,
                (Task::NonRigid, (v, Some(c))) if v > NONRIGID_POSITIVE_IOU => RoiLabel::Class(c),
                (Task::NonRigid, _) => RoiLabel::Background,
            }
        })
        .collect()
}

/// Proposals and labels of one training image.
#[derive(Clone, Debug)]
pub struct PreparedImage {
    pub rigid: Vec<BBox>,
    pub rigid_labels: Vec<RoiLabel>,
    pub nonrigid: Vec<BBox>,
    pub nonrigid_labels: Vec<RoiLabel>,
}

/// Training images with their precomputed proposals and labels.
pub struct TrainingSet<'a> {
    pub samples: &'a [Sample],
    pub prepared: Vec<PreparedImage>,
    benign: Vec<usize>,
    malicious: Vec<usize>,
}

impl<'a> TrainingSet<'a> {
    /// Rigid training proposals are the sliding windows plus
    /// `jitter_per_box` perturbed copies of every ground-truth box.
    pub fn new(
        samples: &'a [Sample],
        arch: &ArchConfig,
        jitter_per_box: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (h, w) = arch.input_size;
        let windows = synth::sliding_windows(h, w, &ProposalConfig::default().scales);
        let nonrigid = synth::nonrigid_windows(h, w);
        let mut prepared = Vec::with_capacity(samples.len());
        let (mut benign, mut malicious) = (Vec::new(), Vec::new());
        for (i, s) in samples.iter().enumerate() {
            if s.image.shape() != [3, h, w] {
                return Err(Error::shape(
                    "training_set",
                    format!(
                        "image {} has shape {:?}, expected [3, {}, {}]",
                        i,
                        s.image.shape(),
                        h,
                        w
                    ),
                ));
            }
            let ann = &s.annotation;
            let mut rigid = windows.clone();
            rigid.extend(synth::jittered_boxes(&ann.rigid, jitter_per_box, h, w, rng));
            prepared.push(PreparedImage {
                rigid_labels: label_rois(&rigid, &ann.rigid, Task::Rigid),
                rigid,
                nonrigid_labels: label_rois(&nonrigid, &ann.nonrigid, Task::NonRigid),
                nonrigid: nonrigid.clone(),
            });
            match ann.event {
                EventLabel::Benign => benign.push(i),
                EventLabel::Malicious => malicious.push(i),
            }
        }
        Ok(TrainingSet {
            samples,
            prepared,
            benign,
            malicious,
        })
    }
}

/// Two images (benign first) and the RoIs drawn from each.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub images: [usize; 2],
    pub event_labels: [usize; 2],
    /// Sampled rigid RoIs per image with head targets.
    pub rigid: [Vec<(BBox, usize)>; 2],
    pub nonrigid: [Vec<(BBox, usize)>; 2],
}

impl TrainBatch {
    pub fn num_rigid(&self) -> usize {
        self.rigid[0].len() + self.rigid[1].len()
    }
}

/// Draws one benign and one malicious image uniformly, then up to
/// `rigid_positives` positive rigid RoIs and negatives to fill `rigid_rois`,
/// uniformly within each pool across both images.
pub fn make_batch(
    set: &TrainingSet,
    rigid_rois: usize,
    rigid_positives: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainBatch> {
    if set.benign.is_empty() || set.malicious.is_empty() {
        return Err(Error::invalid(
            "make_batch",
            format!(
                "need both event classes, have {} benign and {} malicious images",
                set.benign.len(),
                set.malicious.len()
            ),
        ));
    }
    let images = [
        set.benign[rng.random_range(0..set.benign.len())],
        set.malicious[rng.random_range(0..set.malicious.len())],
    ];
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (slot, &img) in images.iter().enumerate() {
        let p = &set.prepared[img];
        for (j, label) in p.rigid_labels.iter().enumerate() {
            match label {
                RoiLabel::Class(_) => pos.push((slot, j)),
                RoiLabel::Background => neg.push((slot, j)),
                RoiLabel::Ignore => {}
            }
        }
    }
    let n_pos = rigid_positives.min(pos.len());
    let n_neg = (rigid_rois - n_pos).min(neg.len());
    let mut rigid: [Vec<(BBox, usize)>; 2] = [Vec::new(), Vec::new()];
    for (pool, n) in [(&pos, n_pos), (&neg, n_neg)] {
        let mut picked: Vec<usize> = index::sample(rng, pool.len(), n).into_vec();
        picked.sort_unstable();
        for k in picked {
            let (slot, j) = pool[k];
            let p = &set.prepared[images[slot]];
            rigid[slot].push((p.rigid[j], p.rigid_labels[j].target().unwrap()));
        }
    }
    let nonrigid = images.map(|img| {
        let p = &set.prepared[img];
        p.nonrigid
            .iter()
            .zip(&p.nonrigid_labels)
            .map(|(b, l)| (*b, l.target().unwrap()))
            .collect()
    });
    Ok(TrainBatch {
        images,
        event_labels: [EventLabel::Benign.index(), EventLabel::Malicious.index()],
        rigid,
        nonrigid,
    })
}

/// Mean cross-entropy over RoIs spread across images: each per-image mean is
/// weighted by its share of the RoIs.
fn pooled_ce(tape: &mut Tape, parts: Vec<(NodeId, usize)>) -> Result<NodeId> {
    let total: usize = parts.iter().map(|p| p.1).sum();
    let ids: Vec<NodeId> = parts.iter().map(|p| p.0).collect();
    let coeffs: Vec<f64> = parts.iter().map(|p| p.1 as f64 / total as f64).collect();
    tape.linear_combination(&ids, &coeffs)
}

fn head_loss(
    tape: &mut Tape,
    cfg: &ArchConfig,
    b: &Bound,
    branch: Branch,
    shared: &[NodeId; 2],
    rois: &[Vec<(BBox, usize)>; 2],
) -> Result<Option<NodeId>> {
    let mut parts = Vec::new();
    for slot in 0..2 {
        if rois[slot].is_empty() {
            continue;
        }
        let boxes: Vec<BBox> = rois[slot].iter().map(|r| r.0).collect();
        let labels: Vec<Option<usize>> = rois[slot].iter().map(|r| Some(r.1)).collect();
        let head = detection_head(tape, cfg, b, branch, shared[slot], &boxes)?;
        parts.push((
            tape.softmax_cross_entropy(head.logits, &labels)?,
            boxes.len(),
        ));
    }
    if parts.is_empty() {
        return Ok(None);
    }
    pooled_ce(tape, parts).map(Some)
}

/// Loss of one stage-1 or stage-2 batch on a fresh tape.
fn joint_loss(
    tape: &mut Tape,
    params: &NetworkParams,
    b: &Bound,
    set: &TrainingSet,
    batch: &TrainBatch,
    stage_id: u8,
) -> Result<NodeId> {
    let cfg = &params.config;
    let mut shared = Vec::with_capacity(2);
    for &i in &batch.images {
        let img = tape.constant(set.samples[i].image.clone());
        shared.push(network::backbone(tape, cfg, b, img)?);
    }
    let shared = [shared[0], shared[1]];
    let mut terms = Vec::new();
    if let Some(l) = head_loss(tape, cfg, b, Branch::Rigid, &shared, &batch.rigid)? {
        terms.push(l);
    }
    if stage_id == 2 {
        if let Some(l) = head_loss(tape, cfg, b, Branch::NonRigid, &shared, &batch.nonrigid)? {
            terms.push(l);
        }
        let whole = BBox::whole(cfg.input_size.1 as f64, cfg.input_size.0 as f64);
        let (ph, pw) = cfg.roi_pool_size;
        let mut parts = Vec::new();
        for (slot, &map) in shared.iter().enumerate() {
            let pooled = tape.roi_pool(map, &[whole], cfg.spatial_scale(), ph, pw)?;
            let logits = event_head(tape, cfg, b, pooled, &InjectedNodes::default())?;
            parts.push((
                tape.softmax_cross_entropy(logits, &[Some(batch.event_labels[slot])])?,
                1,
            ));
        }
        terms.push(pooled_ce(tape, parts)?);
    }
    if terms.is_empty() {
        return Err(Error::invalid("run_stage", "batch produced no loss terms"));
    }
    let ones = vec![1.0; terms.len()];
    tape.linear_combination(&terms, &ones)
}

fn event_loss_cached(
    tape: &mut Tape,
    cfg: &ArchConfig,
    b: &Bound,
    cache: &[ImageFeatures],
    batch: &TrainBatch,
) -> Result<NodeId> {
    let mut parts = Vec::new();
    for slot in 0..2 {
        let logits = event_logits_from_features(tape, cfg, b, &cache[batch.images[slot]])?;
        parts.push((
            tape.softmax_cross_entropy(logits, &[Some(batch.event_labels[slot])])?,
            1,
        ));
    }
    pooled_ce(tape, parts)
}

fn collect_grads(tape: &Tape, b: &Bound, trainable: &[&str]) -> GradMap {
    let mut grads = GradMap::new();
    for (key, id) in b.iter() {
        let group = key.split_once('.').unwrap().0;
        if trainable.contains(&group) {
            if let Some(g) = tape.grad(id) {
                grads.insert(key.to_string(), g.to_vec());
            }
        }
    }
    grads
}

/// Output of [`run_stage`].
#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub params: NetworkParams,
    /// Batch loss at every iteration.
    pub losses: Vec<f64>,
}

fn check_order(stage: &StageConfig, params: &NetworkParams) -> Result<()> {
    if params.stage + 1 != stage.stage_id {
        return Err(Error::StageOrder {
            stage: stage.stage_id,
            reason: format!(
                "it consumes the output of stage {}, but the parameters come from stage {}",
                stage.stage_id - 1,
                params.stage
            ),
        });
    }
    if params.config.injection_site != InjectionSite::None {
        return Err(Error::StageOrder {
            stage: stage.stage_id,
            reason: format!(
                "input parameters already carry an injection-site {} event head",
                params.config.injection_site
            ),
        });
    }
    Ok(())
}

/// Stage-3 event head: C6_e kept, C7_e kept (its input widened with
/// Gaussian(0, 0.01) weights for injected channels when injecting at C6),
/// FC_e drawn fresh from Gaussian(0, 0.01) at the new width.
pub fn reinit_event_head(
    params: &NetworkParams,
    site: InjectionSite,
    rng: &mut ChaCha8Rng,
) -> Result<NetworkParams> {
    let config = params.config.with_injection(site);
    let mut groups = params.groups().to_vec();
    let event = groups.iter_mut().find(|g| g.name == EVENT).unwrap();

    let old_c7 = event.get("c7.weight").unwrap().clone();
    let [c_out, c_in_old, kh, kw] = *old_c7.shape() else {
        unreachable!()
    };
    let c_in = config.event_c7_in();
    if c_in != c_in_old {
        let extra = network::gaussian(&[c_out, c_in - c_in_old, kh, kw], 0.01, rng);
        let k = kh * kw;
        let mut data = Vec::with_capacity(c_out * c_in * k);
        for o in 0..c_out {
            data.extend_from_slice(&old_c7.data()[o * c_in_old * k..][..c_in_old * k]);
            let n_extra = (c_in - c_in_old) * k;
            data.extend_from_slice(&extra.data()[o * n_extra..][..n_extra]);
        }
        event.replace("c7.weight", Tensor::new(vec![c_out, c_in, kh, kw], data)?)?;
    }
    let fc_shape = [config.num_events, config.event_fc_in()];
    event.replace("fc.weight", network::gaussian(&fc_shape, 0.01, rng))?;
    event.replace("fc.bias", Tensor::zeros(&[config.num_events]))?;
    NetworkParams::from_groups(config, params.stage, groups)
}

/// Inputs the frozen layers hand to the event head, one entry per training
/// image. Valid for any injection site, since every site reads the same maps.
pub fn feature_cache(params: &NetworkParams, set: &TrainingSet) -> Result<Vec<ImageFeatures>> {
    set.samples
        .iter()
        .zip(&set.prepared)
        .map(|(s, p)| {
            let rigid = synth::sliding_windows(
                params.config.input_size.0,
                params.config.input_size.1,
                &ProposalConfig::default().scales,
            );
            network::image_features(&s.image, params, &rigid, &p.nonrigid)
        })
        .collect()
}

fn set_trainable(params: &mut NetworkParams, trainable: &[&str]) {
    for g in params.groups_mut() {
        g.trainable = trainable.contains(&g.name.as_str());
    }
}

/// Runs one stage.
///
/// Stage 3 expects stage-2 parameters (no injection). It builds the
/// frozen-feature cache itself; use [`run_stage3_cached`] to share a cache
/// between several stage-3 runs.
pub fn run_stage(
    stage: &StageConfig,
    params: NetworkParams,
    set: &TrainingSet,
    train: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StageOutcome> {
    stage.validate()?;
    check_order(stage, &params)?;
    if stage.stage_id == 3 {
        let cache = feature_cache(&params, set)?;
        return run_stage3_cached(stage, &params, set, &cache, train, rng);
    }
    let mut params = params;
    set_trainable(&mut params, &stage.trainable_groups);
    let mut sgd = Sgd::new(stage.momentum, stage.weight_decay);
    let mut losses = Vec::with_capacity(stage.iterations);
    for it in 0..stage.iterations {
        let batch = make_batch(set, train.rigid_rois, train.rigid_positives, rng)?;
        let mut tape = Tape::new();
        let b = Bound::new(&mut tape, &params, &stage.trainable_groups);
        let loss = joint_loss(&mut tape, &params, &b, set, &batch, stage.stage_id)?;
        let value = finite_loss(&tape, loss, stage.stage_id, it)?;
        tape.backward(loss)?;
        let grads = collect_grads(&tape, &b, &stage.trainable_groups);
        let lr = lr_schedule(stage.lr, it, stage.step_size, stage.gamma);
        sgd.step(params.groups_mut(), &grads, lr)?;
        losses.push(value);
        log_progress(stage.stage_id, it, stage.iterations, &losses);
    }
    params.stage = stage.stage_id;
    Ok(StageOutcome { params, losses })
}

/// Stage 3 over precomputed frozen features from [`feature_cache`].
pub fn run_stage3_cached(
    stage: &StageConfig,
    stage2: &NetworkParams,
    set: &TrainingSet,
    cache: &[ImageFeatures],
    train: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StageOutcome> {
    stage.validate()?;
    if stage.stage_id != 3 {
        return Err(Error::invalid(
            "run_stage3_cached",
            "only stage 3 uses cached features",
        ));
    }
    check_order(stage, stage2)?;
    if cache.len() != set.samples.len() {
        return Err(Error::invalid(
            "run_stage3_cached",
            format!(
                "cache has {} entries for {} images",
                cache.len(),
                set.samples.len()
            ),
        ));
    }
    let mut params = reinit_event_head(stage2, stage.injection_site, rng)?;
    set_trainable(&mut params, &stage.trainable_groups);
    let mut sgd = Sgd::new(stage.momentum, stage.weight_decay);
    let mut losses = Vec::with_capacity(stage.iterations);
    for it in 0..stage.iterations {
        let batch = make_batch(set, train.rigid_rois, train.rigid_positives, rng)?;
        let mut tape = Tape::new();
        let b = Bound::new(&mut tape, &params, &stage.trainable_groups);
        let loss = event_loss_cached(&mut tape, &params.config, &b, cache, &batch)?;
        let value = finite_loss(&tape, loss, 3, it)?;
        tape.backward(loss)?;
        let grads = collect_grads(&tape, &b, &stage.trainable_groups);
        let lr = lr_schedule(stage.lr, it, stage.step_size, stage.gamma);
        sgd.step(params.groups_mut(), &grads, lr)?;
        losses.push(value);
        log_progress(3, it, stage.iterations, &losses);
    }
    for name in [SHARED, RIGID, NONRIGID] {
        if params.group(name).iter().ne(stage2.group(name).iter()) {
            return Err(Error::StageOrder {
                stage: 3,
                reason: format!("frozen group {} changed during stage 3", name),
            });
        }
    }
    params.stage = 3;
    Ok(StageOutcome { params, losses })
}

fn finite_loss(tape: &Tape, loss: NodeId, stage: u8, it: usize) -> Result<f64> {
    let v = tape.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFinite {
            op: format!("stage {} loss", stage),
            detail: format!("loss is {} at iteration {}", v, it),
        });
    }
    Ok(v)
}

fn log_progress(stage: u8, it: usize, total: usize, losses: &[f64]) {
    let every = (total / 10).max(1);
    if (it + 1).is_multiple_of(every) || it + 1 == total {
        let window = &losses[losses.len().saturating_sub(every)..];
        let mean = window.iter().sum::<f64>() / window.len() as f64;
        log::info!("stage {} iter {}/{} loss {:.4}", stage, it + 1, total, mean);
    }
}
