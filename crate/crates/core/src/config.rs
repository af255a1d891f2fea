//! Training configuration and its `key = value` file format.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{ArchConfig, InjectionSite};

/// Iteration budget preset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Short schedule for 64x64 synthetic data; same step/iteration ratios.
    #[default]
    Desk,
    /// 50k/20k/20k iterations with steps 30k/12k/12k.
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::invalid(
                "profile",
                format!("unknown profile {:?} (expected desk or paper)", other),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub lr: f64,
    pub iters: usize,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub stages: [StageSchedule; 3],
    pub gamma: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Rigid RoIs per two-image batch.
    pub rigid_rois: usize,
    /// Upper bound on positives among `rigid_rois`.
    pub rigid_positives: usize,
    /// Jittered copies of each ground-truth box added to the rigid
    /// training proposals.
    pub jitter_per_box: usize,
}

impl TrainConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let stages = match profile {
            Profile::Desk => [
                StageSchedule {
                    lr: 0.001,
                    iters: 2000,
                    step: 1200,
                },
                StageSchedule {
                    lr: 0.0001,
                    iters: 800,
                    step: 480,
                },
                StageSchedule {
                    lr: 0.0001,
                    iters: 800,
                    step: 480,
                },
            ],
            Profile::Paper => [
                StageSchedule {
                    lr: 0.001,
                    iters: 50_000,
                    step: 30_000,
                },
                StageSchedule {
                    lr: 0.0001,
                    iters: 20_000,
                    step: 12_000,
                },
                StageSchedule {
                    lr: 0.0001,
                    iters: 20_000,
                    step: 12_000,
                },
            ],
        };
        TrainConfig {
            arch: ArchConfig::default(),
            stages,
            gamma: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            rigid_rois: 64,
            rigid_positives: 16,
            jitter_per_box: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let bad = |d: String| Err(Error::invalid("train_config", d));
        for (i, s) in self.stages.iter().enumerate() {
            if !(s.lr.is_finite() && s.lr >= 0.0) {
                return bad(format!("stage{}.lr must be finite and >= 0", i + 1));
            }
            if s.step == 0 || s.step > s.iters.max(1) {
                return bad(format!(
                    "stage{}.step must satisfy 1 <= step <= iters (got step {}, iters {})",
                    i + 1,
                    s.step,
                    s.iters
                ));
            }
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} outside (0, 1]", self.gamma));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!(
                "weight_decay {} must be finite and >= 0",
                self.weight_decay
            ));
        }
        if self.rigid_rois == 0 || self.rigid_positives > self.rigid_rois {
            return bad(format!(
                "need 1 <= rigid_rois and rigid_positives <= rigid_rois (got {}, {})",
                self.rigid_rois, self.rigid_positives
            ));
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are ignored; unknown keys and malformed values are errors.
    pub fn apply(mut self, text: &str) -> Result<Self> {
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: line_no,
                detail: format!("expected `key = value`, got {:?}", line),
            })?;
            let (key, value) = (key.trim(), value.trim());
            self.set(key, value).map_err(|detail| Error::Config {
                line: line_no,
                detail: format!("{}: {}", key, detail),
            })?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn parse(text: &str, profile: Profile) -> Result<Self> {
        Self::for_profile(profile).apply(text)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        if let Some(rest) = key.strip_prefix("stage") {
            let (idx, field) = rest.split_once('.').ok_or("unknown key")?;
            let idx: usize = match idx {
                "1" => 0,
                "2" => 1,
                "3" => 2,
                _ => return Err("stage must be 1, 2 or 3".into()),
            };
            let s = &mut self.stages[idx];
            return match field {
                "lr" => num(value).map(|v| s.lr = v),
                "iters" => num(value).map(|v| s.iters = v),
                "step" => num(value).map(|v| s.step = v),
                _ => Err("unknown key".into()),
            };
        }
        let a = &mut self.arch;
        match key {
            "gamma" => self.gamma = num(value)?,
            "momentum" => self.momentum = num(value)?,
            "weight_decay" => self.weight_decay = num(value)?,
            "seed" => self.seed = num(value)?,
            "batch.rigid_rois" => self.rigid_rois = num(value)?,
            "batch.rigid_positives" => self.rigid_positives = num(value)?,
            "batch.jitter_per_box" => self.jitter_per_box = num(value)?,
            "top_k" | "arch.top_k" => a.top_k = num(value)?,
            "injection_site" | "arch.injection_site" => {
                a.injection_site = value.parse::<InjectionSite>().map_err(|e| e.to_string())?
            }
            "arch.input_size" => a.input_size = pair(value)?,
            "arch.roi_pool_size" => a.roi_pool_size = pair(value)?,
            "arch.shared_channels" => {
                a.shared_channels = value
                    .split(',')
                    .map(|v| num(v.trim()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "arch.c6" => a.c6 = num(value)?,
            "arch.c7" => a.c7 = num(value)?,
            "arch.num_events" => a.num_events = num(value)?,
            "arch.num_rigid_classes" => a.num_rigid_classes = num(value)?,
            "arch.num_nonrigid_classes" => a.num_nonrigid_classes = num(value)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Canonical `key = value` text; parsing it reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, st) in self.stages.iter().enumerate() {
            let n = i + 1;
            let _ = writeln!(
                s,
                "stage{n}.lr = {:?}\nstage{n}.iters = {}\nstage{n}.step = {}",
                st.lr, st.iters, st.step
            );
        }
        let a = &self.arch;
        let channels: Vec<String> = a.shared_channels.iter().map(|c| c.to_string()).collect();
        let _ = write!(
            s,
            "gamma = {:?}\nmomentum = {:?}\nweight_decay = {:?}\nseed = {}\n\
             batch.rigid_rois = {}\nbatch.rigid_positives = {}\nbatch.jitter_per_box = {}\n\
             top_k = {}\ninjection_site = {}\n\
             arch.input_size = {}x{}\narch.shared_channels = {}\narch.c6 = {}\narch.c7 = {}\n\
             arch.roi_pool_size = {}x{}\narch.num_events = {}\narch.num_rigid_classes = {}\n\
             arch.num_nonrigid_classes = {}\n",
            self.gamma,
            self.momentum,
            self.weight_decay,
            self.seed,
            self.rigid_rois,
            self.rigid_positives,
            self.jitter_per_box,
            a.top_k,
            a.injection_site,
            a.input_size.0,
            a.input_size.1,
            channels.join(","),
            a.c6,
            a.c7,
            a.roi_pool_size.0,
            a.roi_pool_size.1,
            a.num_events,
            a.num_rigid_classes,
            a.num_nonrigid_classes,
        );
        s
    }

    /// Digest of the full configuration, seed included.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_text().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

fn num<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| format!("cannot parse {:?}: {}", value, e))
}

/// `HxW`, e.g. `64x64`.
fn pair(value: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = value
        .split_once('x')
        .ok_or_else(|| format!("expected HxW, got {:?}", value))?;
    Ok((num(a.trim())?, num(b.trim())?))
}
