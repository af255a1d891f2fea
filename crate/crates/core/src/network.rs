//! The three-branch network: shared backbone, RoI pooling, and per-task
//! C6/C7/average-pool/FC heads, with optional injection of detection feature
//! maps into the event head.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detection::{self, BBox, RoiBatch};
use crate::error::{Error, Result};
use crate::ops;
use crate::tape::{NodeId, Tape};
use crate::tensor::{ByteReader, ParamGroup, Tensor};

pub const SHARED: &str = "shared";
pub const RIGID: &str = "rigid_branch";
pub const NONRIGID: &str = "nonrigid_branch";
pub const EVENT: &str = "event_branch";
pub const GROUP_NAMES: [&str; 4] = [SHARED, RIGID, NONRIGID, EVENT];

/// Where detection feature maps join the event head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InjectionSite {
    #[default]
    None,
    C6,
    C7,
    Both,
}

impl InjectionSite {
    pub const ALL: [InjectionSite; 4] = [
        InjectionSite::None,
        InjectionSite::C6,
        InjectionSite::C7,
        InjectionSite::Both,
    ];

    pub fn at_c6(self) -> bool {
        matches!(self, InjectionSite::C6 | InjectionSite::Both)
    }

    pub fn at_c7(self) -> bool {
        matches!(self, InjectionSite::C7 | InjectionSite::Both)
    }

    pub fn is_enabled(self) -> bool {
        self != InjectionSite::None
    }
}

impl fmt::Display for InjectionSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InjectionSite::None => "none",
            InjectionSite::C6 => "c6",
            InjectionSite::C7 => "c7",
            InjectionSite::Both => "both",
        })
    }
}

impl FromStr for InjectionSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(InjectionSite::None),
            "c6" => Ok(InjectionSite::C6),
            "c7" => Ok(InjectionSite::C7),
            "both" => Ok(InjectionSite::Both),
            other => Err(Error::invalid(
                "injection_site",
                format!("unknown site {:?} (expected none, c6, c7 or both)", other),
            )),
        }
    }
}

/// Detection branches; the event branch is handled separately.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Rigid,
    NonRigid,
}

impl Branch {
    pub fn group(self) -> &'static str {
        match self {
            Branch::Rigid => RIGID,
            Branch::NonRigid => NONRIGID,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Input `(H, W)`; images always have 3 channels.
    pub input_size: (usize, usize),
    /// One conv3x3 + relu + maxpool2 block per entry.
    pub shared_channels: Vec<usize>,
    pub c6: usize,
    pub c7: usize,
    pub roi_pool_size: (usize, usize),
    pub num_events: usize,
    /// Foreground classes; the head adds one background class.
    pub num_rigid_classes: usize,
    pub num_nonrigid_classes: usize,
    pub injection_site: InjectionSite,
    pub top_k: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input_size: (64, 64),
            shared_channels: vec![16, 32],
            c6: 32,
            c7: 32,
            roi_pool_size: (6, 6),
            num_events: 2,
            num_rigid_classes: 3,
            num_nonrigid_classes: 2,
            injection_site: InjectionSite::None,
            top_k: 3,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: &str| Err(Error::invalid("arch_config", d.to_string()));
        if self.shared_channels.is_empty() || self.shared_channels.contains(&0) {
            return bad("shared_channels must be nonempty and >= 1");
        }
        if self.c6 == 0 || self.c7 == 0 {
            return bad("c6 and c7 must be >= 1");
        }
        if self.roi_pool_size.0 == 0 || self.roi_pool_size.1 == 0 {
            return bad("roi_pool_size must be at least 1x1");
        }
        if self.num_events < 2 || self.num_rigid_classes == 0 || self.num_nonrigid_classes == 0 {
            return bad("need >= 2 events and >= 1 class per detection branch");
        }
        if self.top_k == 0 {
            return bad("top_k must be >= 1");
        }
        let (map_h, map_w) = self.map_size();
        if map_h == 0 || map_w == 0 {
            return bad("input too small for the number of pooling blocks");
        }
        Ok(())
    }

    pub fn with_injection(&self, site: InjectionSite) -> Self {
        ArchConfig {
            injection_site: site,
            ..self.clone()
        }
    }

    /// Spatial size of the shared feature map.
    pub fn map_size(&self) -> (usize, usize) {
        let mut hw = self.input_size;
        for _ in &self.shared_channels {
            hw = (hw.0 / 2, hw.1 / 2);
        }
        hw
    }

    /// Image-to-map coordinate scale.
    pub fn spatial_scale(&self) -> f64 {
        0.5f64.powi(self.shared_channels.len() as i32)
    }

    pub fn shared_out(&self) -> usize {
        *self.shared_channels.last().unwrap()
    }

    pub fn classes(&self, branch: Branch) -> usize {
        match branch {
            Branch::Rigid => self.num_rigid_classes + 1,
            Branch::NonRigid => self.num_nonrigid_classes + 1,
        }
    }

    /// Input channels of the event C7 layer.
    pub fn event_c7_in(&self) -> usize {
        if self.injection_site.at_c6() {
            3 * self.c6
        } else {
            self.c6
        }
    }

    /// Input width of the event FC layer.
    pub fn event_fc_in(&self) -> usize {
        if self.injection_site.at_c7() {
            3 * self.c7
        } else {
            self.c7
        }
    }

    fn canonical(&self) -> String {
        format!(
            "input={}x{};shared={:?};c6={};c7={};roi={}x{};events={};rigid={};nonrigid={};site={};top_k={}",
            self.input_size.0,
            self.input_size.1,
            self.shared_channels,
            self.c6,
            self.c7,
            self.roi_pool_size.0,
            self.roi_pool_size.1,
            self.num_events,
            self.num_rigid_classes,
            self.num_nonrigid_classes,
            self.injection_site,
            self.top_k
        )
    }

    /// Stable 64-bit digest of every architectural field.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.canonical().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    /// Expected `(group, param, shape)` layout, in storage order.
    pub fn param_layout(&self) -> Vec<(&'static str, String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = 3;
        for (i, &c) in self.shared_channels.iter().enumerate() {
            out.push((SHARED, format!("conv{}.weight", i + 1), vec![c, c_in, 3, 3]));
            out.push((SHARED, format!("conv{}.bias", i + 1), vec![c]));
            c_in = c;
        }
        let branch = |group, c7_in: usize, fc_in: usize, k: usize, out: &mut Vec<_>| {
            out.push((
                group,
                "c6.weight".to_string(),
                vec![self.c6, self.shared_out(), 3, 3],
            ));
            out.push((group, "c6.bias".to_string(), vec![self.c6]));
            out.push((group, "c7.weight".to_string(), vec![self.c7, c7_in, 3, 3]));
            out.push((group, "c7.bias".to_string(), vec![self.c7]));
            out.push((group, "fc.weight".to_string(), vec![k, fc_in]));
            out.push((group, "fc.bias".to_string(), vec![k]));
        };
        branch(
            RIGID,
            self.c6,
            self.c7,
            self.classes(Branch::Rigid),
            &mut out,
        );
        branch(
            NONRIGID,
            self.c6,
            self.c7,
            self.classes(Branch::NonRigid),
            &mut out,
        );
        branch(
            EVENT,
            self.event_c7_in(),
            self.event_fc_in(),
            self.num_events,
            &mut out,
        );
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub config: ArchConfig,
    /// Last completed training stage; 0 for a freshly built network.
    pub stage: u8,
    groups: Vec<ParamGroup>,
}

impl NetworkParams {
    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParamGroup] {
        &mut self.groups
    }

    pub fn group(&self, name: &str) -> &ParamGroup {
        self.groups
            .iter()
            .find(|g| g.name == name)
            .unwrap_or_else(|| panic!("no parameter group {}", name))
    }

    pub fn group_mut(&mut self, name: &str) -> &mut ParamGroup {
        self.groups
            .iter_mut()
            .find(|g| g.name == name)
            .unwrap_or_else(|| panic!("no parameter group {}", name))
    }

    pub fn get(&self, group: &str, param: &str) -> &Tensor {
        self.group(group)
            .get(param)
            .unwrap_or_else(|| panic!("no parameter {}.{}", group, param))
    }

    pub fn num_values(&self) -> usize {
        self.groups.iter().map(ParamGroup::num_values).sum()
    }

    /// Checks every parameter against the layout implied by `config`.
    pub fn check_layout(&self) -> Result<()> {
        let layout = self.config.param_layout();
        let count: usize = self.groups.iter().map(ParamGroup::len).sum();
        if count != layout.len() {
            return Err(Error::format(
                "network params",
                format!("{} parameters, layout expects {}", count, layout.len()),
            ));
        }
        for (group, name, shape) in layout {
            let t = self.group(group).get(&name).ok_or_else(|| {
                Error::format("network params", format!("missing {}.{}", group, name))
            })?;
            if t.shape() != shape.as_slice() {
                return Err(Error::format(
                    "network params",
                    format!(
                        "{}.{} has shape {:?}, config implies {:?}",
                        group,
                        name,
                        t.shape(),
                        shape
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Assembles params from explicit tensors, checking them against `config`.
    pub fn from_groups(config: ArchConfig, stage: u8, groups: Vec<ParamGroup>) -> Result<Self> {
        let params = NetworkParams {
            config,
            stage,
            groups,
        };
        for name in GROUP_NAMES {
            if !params.groups.iter().any(|g| g.name == name) {
                return Err(Error::format(
                    "network params",
                    format!("missing group {}", name),
                ));
            }
        }
        params.check_layout()?;
        Ok(params)
    }

    /// Encodes as a `DODC` checkpoint.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut records: Vec<(String, &Tensor)> = Vec::new();
        for g in &self.groups {
            for (name, t) in g.iter() {
                records.push((format!("{}.{}", g.name, name), t));
            }
        }
        let stage = Tensor::scalar(self.stage as f64);
        records.push((STAGE_RECORD.to_string(), &stage));

        let mut out = Vec::new();
        out.extend_from_slice(DODC_MAGIC);
        out.push(DODC_VERSION);
        out.extend_from_slice(&self.config.hash().to_le_bytes());
        out.extend_from_slice(&(records.len() as u64).to_le_bytes());
        for (name, t) in records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&t.to_dten());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], config: &ArchConfig) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "DODC");
        let magic = r.take(4)?;
        if magic != DODC_MAGIC {
            return Err(Error::format("DODC", format!("bad magic {:?}", magic)));
        }
        let version = r.u8()?;
        if version != DODC_VERSION {
            return Err(Error::format(
                "DODC",
                format!("unsupported version {}", version),
            ));
        }
        let found = r.u64()?;
        let expected = config.hash();
        if found != expected {
            return Err(Error::ConfigHash { expected, found });
        }
        let count = r.u64()?;
        let mut groups: Vec<ParamGroup> = GROUP_NAMES.iter().map(|&n| ParamGroup::new(n)).collect();
        let mut stage = None;
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format("DODC", "record name is not UTF-8"))?
                .to_string();
            let (tensor, used) = Tensor::from_dten(r.rest())?;
            r.advance(used);
            if name == STAGE_RECORD {
                stage = Some(tensor.data().first().copied().unwrap_or(-1.0));
                continue;
            }
            let (group, param) = name
                .split_once('.')
                .ok_or_else(|| Error::format("DODC", format!("record {:?} lacks a group", name)))?;
            let g = groups
                .iter_mut()
                .find(|g| g.name == group)
                .ok_or_else(|| Error::format("DODC", format!("unknown group {:?}", group)))?;
            g.insert(param, tensor)
                .map_err(|e| Error::format("DODC", e.to_string()))?;
        }
        if !r.is_empty() {
            return Err(Error::format("DODC", "trailing bytes after last record"));
        }
        let stage = match stage {
            Some(s) if (0.0..=3.0).contains(&s) && s.fract() == 0.0 => s as u8,
            Some(s) => return Err(Error::format("DODC", format!("invalid stage {}", s))),
            None => return Err(Error::format("DODC", "missing stage record")),
        };
        Self::from_groups(config.clone(), stage, groups)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, config: &ArchConfig) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, config)
    }
}

pub const DODC_MAGIC: &[u8; 4] = b"DODC";
pub const DODC_VERSION: u8 = 1;
const STAGE_RECORD: &str = "meta.stage";

/// He-normal weights (std `sqrt(2 / fan_in)`), zero biases.
pub fn build(config: &ArchConfig, seed: u64) -> Result<NetworkParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: Vec<ParamGroup> = GROUP_NAMES.iter().map(|&n| ParamGroup::new(n)).collect();
    for (group, name, shape) in config.param_layout() {
        let tensor = if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else {
            let fan_in: usize = shape[1..].iter().product();
            gaussian(&shape, (2.0 / fan_in as f64).sqrt(), &mut rng)
        };
        let g = groups.iter_mut().find(|g| g.name == group).unwrap();
        g.insert(name, tensor)?;
    }
    NetworkParams::from_groups(config.clone(), 0, groups)
}

pub(crate) fn gaussian(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).unwrap()
}

/// Parameters placed on a tape, keyed `"<group>.<param>"`.
pub struct Bound {
    ids: HashMap<String, NodeId>,
}

impl Bound {
    /// Leaves for groups in `trainable` are differentiated; others are constants.
    pub fn new(tape: &mut Tape, params: &NetworkParams, trainable: &[&str]) -> Self {
        let mut ids = HashMap::new();
        for g in params.groups() {
            let train = trainable.contains(&g.name.as_str());
            for (name, t) in g.iter() {
                let id = if train {
                    tape.variable(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                ids.insert(format!("{}.{}", g.name, name), id);
            }
        }
        Bound { ids }
    }

    pub fn id(&self, group: &str, param: &str) -> NodeId {
        self.ids[&format!("{}.{}", group, param)]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

fn conv_layer(tape: &mut Tape, b: &Bound, group: &str, layer: &str, x: NodeId) -> Result<NodeId> {
    let w = b.id(group, &format!("{}.weight", layer));
    let bias = b.id(group, &format!("{}.bias", layer));
    let y = tape.conv2d(x, w, bias, 1, 1)?;
    Ok(tape.relu(y))
}

/// Shared layers: `[3,H,W]` image to `[C,H',W']` map.
pub fn backbone(tape: &mut Tape, cfg: &ArchConfig, b: &Bound, image: NodeId) -> Result<NodeId> {
    let (h, w) = cfg.input_size;
    if tape.value(image).shape() != [3, h, w] {
        return Err(Error::shape(
            "backbone",
            format!(
                "image has shape {:?}, config expects [3, {}, {}]",
                tape.value(image).shape(),
                h,
                w
            ),
        ));
    }
    let mut x = image;
    for i in 0..cfg.shared_channels.len() {
        x = conv_layer(tape, b, SHARED, &format!("conv{}", i + 1), x)?;
        x = tape.max_pool2d(x, 2, 2)?;
    }
    Ok(x)
}

/// Intermediate outputs of a detection head over a batch of RoIs.
#[derive(Clone, Copy, Debug)]
pub struct HeadNodes {
    /// `[N,c6,h,w]` after relu.
    pub c6: NodeId,
    /// `[N,c7,h,w]` after relu.
    pub c7: NodeId,
    /// `[N,K]`.
    pub logits: NodeId,
}

pub fn detection_head(
    tape: &mut Tape,
    cfg: &ArchConfig,
    b: &Bound,
    branch: Branch,
    shared: NodeId,
    rois: &[BBox],
) -> Result<HeadNodes> {
    if rois.is_empty() {
        return Err(Error::invalid("forward_detection", "no RoIs supplied"));
    }
    let (ph, pw) = cfg.roi_pool_size;
    let pooled = tape.roi_pool(shared, rois, cfg.spatial_scale(), ph, pw)?;
    let group = branch.group();
    let c6 = conv_layer(tape, b, group, "c6", pooled)?;
    let c7 = conv_layer(tape, b, group, "c7", c6)?;
    let avg = tape.global_avg_pool(c7)?;
    let logits = tape.fully_connected(avg, b.id(group, "fc.weight"), b.id(group, "fc.bias"))?;
    Ok(HeadNodes { c6, c7, logits })
}

/// Batch-pooled `[C,h,w]` detection maps fed to the event head.
#[derive(Clone, Copy, Debug, Default)]
pub struct InjectedNodes {
    pub c6: Option<(NodeId, NodeId)>,
    pub c7: Option<(NodeId, NodeId)>,
}

/// Event head from the RoI-pooled whole-image map `[1,C,h,w]` to logits `[1,E]`.
pub fn event_head(
    tape: &mut Tape,
    cfg: &ArchConfig,
    b: &Bound,
    event_pooled: NodeId,
    injected: &InjectedNodes,
) -> Result<NodeId> {
    let site = cfg.injection_site;
    if site.at_c6() != injected.c6.is_some() || site.at_c7() != injected.c7.is_some() {
        return Err(Error::invalid(
            "forward_event",
            format!("injected maps do not match injection site {}", site),
        ));
    }
    let mut x = conv_layer(tape, b, EVENT, "c6", event_pooled)?;
    if let Some((rigid, nonrigid)) = injected.c6 {
        x = concat_injected(tape, x, rigid, nonrigid)?;
    }
    x = conv_layer(tape, b, EVENT, "c7", x)?;
    if let Some((rigid, nonrigid)) = injected.c7 {
        x = concat_injected(tape, x, rigid, nonrigid)?;
    }
    let avg = tape.global_avg_pool(x)?;
    tape.fully_connected(avg, b.id(EVENT, "fc.weight"), b.id(EVENT, "fc.bias"))
}

/// Concatenates event, rigid, non-rigid maps (in that order) along channels.
fn concat_injected(
    tape: &mut Tape,
    event: NodeId,
    rigid: NodeId,
    nonrigid: NodeId,
) -> Result<NodeId> {
    let mut parts = vec![event];
    for m in [rigid, nonrigid] {
        let mut shape = vec![1];
        shape.extend_from_slice(tape.value(m).shape());
        parts.push(tape.reshape(m, &shape)?);
    }
    tape.channel_concat(&parts)
}

/// Max foreground probability of each row of `[N,K]` probabilities, where
/// class 0 is background.
pub fn foreground_scores(probs: &Tensor) -> Vec<f64> {
    let k = *probs.shape().last().unwrap();
    probs
        .data()
        .chunks_exact(k)
        .map(|row| row[1..].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Samples the top-k RoIs of a head by foreground score and batch-pools
/// their maps at the requested layer, all on the tape.
pub fn inject_from_head(
    tape: &mut Tape,
    head: &HeadNodes,
    layer: NodeId,
    top_k: usize,
) -> Result<NodeId> {
    let probs = ops::softmax(tape.value(head.logits))?;
    let keep = detection::top_k_indices(&foreground_scores(&probs), top_k);
    let picked = tape.gather(layer, &keep)?;
    tape.batch_pool(picked)
}

/// Per-RoI inference output of a detection branch.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiOutput {
    pub probs: Tensor,
    pub c6: Tensor,
    pub c7: Tensor,
}

fn inference_tape(params: &NetworkParams) -> (Tape, Bound) {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params, &[]);
    (tape, bound)
}

pub fn forward_backbone(image: &Tensor, params: &NetworkParams) -> Result<Tensor> {
    let (mut tape, b) = inference_tape(params);
    let x = tape.constant(image.clone());
    let out = backbone(&mut tape, &params.config, &b, x)?;
    Ok(tape.value(out).clone())
}

fn split_rows(t: &Tensor) -> Vec<Tensor> {
    let (n, rest) = t.shape().split_first().unwrap();
    let stride: usize = rest.iter().product();
    (0..*n)
        .map(|i| Tensor::new(rest.to_vec(), t.data()[i * stride..][..stride].to_vec()).unwrap())
        .collect()
}

pub fn forward_detection(
    shared_map: &Tensor,
    rois: &[BBox],
    branch: Branch,
    params: &NetworkParams,
) -> Result<Vec<RoiOutput>> {
    let (mut tape, b) = inference_tape(params);
    let shared = tape.constant(shared_map.clone());
    let head = detection_head(&mut tape, &params.config, &b, branch, shared, rois)?;
    let probs = ops::softmax(tape.value(head.logits))?;
    Ok(split_rows(&probs)
        .into_iter()
        .zip(split_rows(tape.value(head.c6)))
        .zip(split_rows(tape.value(head.c7)))
        .map(|((probs, c6), c7)| RoiOutput { probs, c6, c7 })
        .collect())
}

/// Everything the event head consumes from the frozen shared and detection
/// layers for one image. Fixed once those layers are frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    /// RoI-pooled whole-image map `[1,C,h,w]`.
    pub event_pooled: Tensor,
    pub rigid_c6: Tensor,
    pub rigid_c7: Tensor,
    pub nonrigid_c6: Tensor,
    pub nonrigid_c7: Tensor,
    /// `[N,K]` probabilities over the rigid proposals.
    pub rigid_probs: Tensor,
    pub nonrigid_probs: Tensor,
}

fn sampled_pool(outputs: &[RoiOutput], rois: &[BBox], top_k: usize) -> Result<(Tensor, Tensor)> {
    let scores: Vec<f64> = outputs
        .iter()
        .map(|o| foreground_scores(&o.probs)[0])
        .collect();
    let c6 = RoiBatch::new(
        outputs.iter().map(|o| o.c6.clone()).collect(),
        scores.clone(),
        rois.to_vec(),
    )?;
    let c7 = RoiBatch::new(
        outputs.iter().map(|o| o.c7.clone()).collect(),
        scores,
        rois.to_vec(),
    )?;
    Ok((
        detection::batch_pool(&detection::roi_sampler(&c6, top_k)?)?,
        detection::batch_pool(&detection::roi_sampler(&c7, top_k)?)?,
    ))
}

fn stack_probs(outputs: &[RoiOutput]) -> Tensor {
    let k = outputs[0].probs.numel();
    let data = outputs
        .iter()
        .flat_map(|o| o.probs.data().iter().copied())
        .collect();
    Tensor::new(vec![outputs.len(), k], data).unwrap()
}

/// Runs the shared layers and both detection branches over the proposals.
pub fn image_features(
    image: &Tensor,
    params: &NetworkParams,
    proposals_rigid: &[BBox],
    proposals_nonrigid: &[BBox],
) -> Result<ImageFeatures> {
    let cfg = &params.config;
    let shared = forward_backbone(image, params)?;
    let (ph, pw) = cfg.roi_pool_size;
    let whole = BBox::whole(cfg.input_size.1 as f64, cfg.input_size.0 as f64);
    let event_pooled = {
        let p = detection::roi_pool(&shared, &whole, cfg.spatial_scale(), ph, pw)?;
        let mut shape = vec![1];
        shape.extend_from_slice(p.shape());
        p.reshape(shape)?
    };
    let rigid = forward_detection(&shared, proposals_rigid, Branch::Rigid, params)?;
    let nonrigid = forward_detection(&shared, proposals_nonrigid, Branch::NonRigid, params)?;
    let (rigid_c6, rigid_c7) = sampled_pool(&rigid, proposals_rigid, cfg.top_k)?;
    let (nonrigid_c6, nonrigid_c7) = sampled_pool(&nonrigid, proposals_nonrigid, cfg.top_k)?;
    Ok(ImageFeatures {
        event_pooled,
        rigid_c6,
        rigid_c7,
        nonrigid_c6,
        nonrigid_c7,
        rigid_probs: stack_probs(&rigid),
        nonrigid_probs: stack_probs(&nonrigid),
    })
}

/// Event logits `[1,E]` from cached features, on the caller's tape.
pub fn event_logits_from_features(
    tape: &mut Tape,
    cfg: &ArchConfig,
    b: &Bound,
    features: &ImageFeatures,
) -> Result<NodeId> {
    let pooled = tape.constant(features.event_pooled.clone());
    let site = cfg.injection_site;
    let mut injected = InjectedNodes::default();
    if site.at_c6() {
        injected.c6 = Some((
            tape.constant(features.rigid_c6.clone()),
            tape.constant(features.nonrigid_c6.clone()),
        ));
    }
    if site.at_c7() {
        injected.c7 = Some((
            tape.constant(features.rigid_c7.clone()),
            tape.constant(features.nonrigid_c7.clone()),
        ));
    }
    event_head(tape, cfg, b, pooled, &injected)
}

pub fn event_probs_from_features(
    params: &NetworkParams,
    features: &ImageFeatures,
) -> Result<Tensor> {
    let (mut tape, b) = inference_tape(params);
    let logits = event_logits_from_features(&mut tape, &params.config, &b, features)?;
    let probs = ops::softmax(tape.value(logits))?;
    probs.reshape(vec![params.config.num_events])
}

/// Full test-time pass: event probabilities `[E]`.
///
/// With injection enabled both detection branches run over their proposals
/// and their top-k maps are injected; with injection off they are skipped.
pub fn forward_event(
    image: &Tensor,
    params: &NetworkParams,
    proposals_rigid: &[BBox],
    proposals_nonrigid: &[BBox],
) -> Result<Tensor> {
    let cfg = &params.config;
    let (mut tape, b) = inference_tape(params);
    let x = tape.constant(image.clone());
    let shared = backbone(&mut tape, cfg, &b, x)?;
    let (ph, pw) = cfg.roi_pool_size;
    let whole = BBox::whole(cfg.input_size.1 as f64, cfg.input_size.0 as f64);
    let pooled = tape.roi_pool(shared, &[whole], cfg.spatial_scale(), ph, pw)?;
    let mut injected = InjectedNodes::default();
    if cfg.injection_site.is_enabled() {
        if proposals_rigid.is_empty() || proposals_nonrigid.is_empty() {
            return Err(Error::invalid(
                "forward_event",
                "injection is enabled but a proposal list is empty",
            ));
        }
        let rigid = detection_head(&mut tape, cfg, &b, Branch::Rigid, shared, proposals_rigid)?;
        let nonrigid = detection_head(
            &mut tape,
            cfg,
            &b,
            Branch::NonRigid,
            shared,
            proposals_nonrigid,
        )?;
        if cfg.injection_site.at_c6() {
            injected.c6 = Some((
                inject_from_head(&mut tape, &rigid, rigid.c6, cfg.top_k)?,
                inject_from_head(&mut tape, &nonrigid, nonrigid.c6, cfg.top_k)?,
            ));
        }
        if cfg.injection_site.at_c7() {
            injected.c7 = Some((
                inject_from_head(&mut tape, &rigid, rigid.c7, cfg.top_k)?,
                inject_from_head(&mut tape, &nonrigid, nonrigid.c7, cfg.top_k)?,
            ));
        }
    }
    let logits = event_head(&mut tape, cfg, &b, pooled, &injected)?;
    let probs = ops::softmax(tape.value(logits))?;
    probs.reshape(vec![cfg.num_events])
}
