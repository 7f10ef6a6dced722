use std::path::{Path, PathBuf};

use hqnoise::collector::CollectionConfig;
use hqnoise::edn::{EdnConfig, TrainConfig, Upsample};
use hqnoise::guidance::CfgSchedule;
use hqnoise::quality::Metric;
use hqnoise::scheduler::{PredictionType, SigmaSchedule};
use hqnoise::testbed::{ComponentSpec, ToyWorldSpec};
use hqnoise::theory::VerifyConfig;
use hqnoise::{Error, Result, ToyWorld64};
use serde::{Deserialize, Serialize};

/// Whole-run configuration read from a TOML file; every field has a default.
#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    pub schedule: ScheduleSection,
    pub collection: CollectionSection,
    pub world: WorldSection,
    pub filter: FilterSection,
    pub train: TrainSection,
    pub infer: InferSection,
    pub verify: VerifySection,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            steps: 25,
            sigma_min: 0.002,
            sigma_max: 700.0,
            rho: 7.0,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceSection {
    /// `constant` or `triangular`.
    pub mode: String,
    pub front: f64,
    pub back: f64,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        Self {
            mode: "triangular".into(),
            front: 6.0,
            back: 2.5,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectionSection {
    /// Named settings that override `n`, the guidance and the schedule.
    pub preset: Option<String>,
    /// Number of seeds, starting at the master seed.
    pub count: u64,
    pub n: usize,
    pub gamma1: GuidanceSection,
    pub gamma2: f64,
    pub prediction: String,
    pub align: bool,
}

impl Default for CollectionSection {
    fn default() -> Self {
        Self {
            preset: None,
            count: 100,
            n: 16,
            gamma1: GuidanceSection::default(),
            gamma2: 0.0,
            prediction: "v_prediction".into(),
            align: true,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComponentSection {
    pub seed: u64,
    pub std: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub views: usize,
    pub view_shift: usize,
    pub amplitude: f64,
    pub components: Vec<ComponentSection>,
}

impl Default for ComponentSection {
    fn default() -> Self {
        Self {
            seed: 1,
            std: 1.0,
            weight: 0.5,
        }
    }
}

impl Default for WorldSection {
    fn default() -> Self {
        Self {
            channels: 4,
            height: 16,
            width: 16,
            views: 4,
            view_shift: 1,
            amplitude: 1.0,
            components: vec![
                ComponentSection::default(),
                ComponentSection {
                    seed: 2,
                    ..ComponentSection::default()
                },
            ],
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    /// Margin `m`: a pair is kept when `s_rd > s_hq + m`.
    pub threshold: f64,
    pub dynamic_range: f64,
    /// Optional `seed,s_rd,s_hq` file used instead of generation.
    pub scores: Option<PathBuf>,
}

impl Default for FilterSection {
    fn default() -> Self {
        Self {
            threshold: 0.0,
            dynamic_range: 4.0,
            scores: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub shuffle: bool,
    pub channels: [usize; 3],
    pub upsample: String,
    pub zero_head: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            batch_size: t.batch_size,
            decay: t.decay,
            decay_every: t.decay_every,
            epochs: t.epochs,
            shuffle: t.shuffle,
            channels: [16, 16, 32],
            upsample: "pixel_shuffle".into(),
            zero_head: true,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferSection {
    /// `standard`, `inversion` or `with-edn`.
    pub mode: String,
    /// Number of seeds, starting at the master seed.
    pub count: u64,
    pub checkpoint: Option<PathBuf>,
}

impl Default for InferSection {
    fn default() -> Self {
        Self {
            mode: "standard".into(),
            count: 200,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub draws: usize,
    pub tolerance: f64,
    pub coefficient_scale: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        let v = VerifyConfig::default();
        Self {
            draws: v.draws,
            tolerance: v.tolerance,
            coefficient_scale: v.coefficient_scale,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }

    /// Applies `collection.preset`; returns a one-line description when one
    /// is set.
    pub fn apply_preset(&mut self) -> Result<Option<String>> {
        match self.collection.preset.as_deref() {
            None => Ok(None),
            Some("sv3d") => {
                self.collection.n = 16;
                self.collection.gamma1 = GuidanceSection::default();
                self.collection.gamma2 = 0.0;
                self.collection.prediction = "v_prediction".into();
                self.schedule.sigma_max = 700.0;
                let q = self.schedule()?.q();
                Ok(Some(format!(
                    "preset sv3d: n=16, gamma1 triangular 6 -> 2.5, gamma2 0, v_prediction, q={q:.4}"
                )))
            }
            Some(other) => Err(Error::Config(format!("unknown collection preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.filter.threshold >= 0.0) {
            return Err(Error::Config(format!(
                "filter threshold must be non-negative, got {}",
                self.filter.threshold
            )));
        }
        if !(self.filter.dynamic_range > 0.0) {
            return Err(Error::Config("filter dynamic_range must be positive".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        self.schedule()?;
        self.collection()?;
        self.world()?;
        self.train_config()?.validate()?;
        self.edn_config(1.0, 1.0)?.validate()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<SigmaSchedule<f64>> {
        let s = &self.schedule;
        SigmaSchedule::karras(s.steps, s.sigma_min, s.sigma_max, s.rho)
    }

    pub fn prediction(&self) -> Result<PredictionType> {
        self.collection.prediction.parse()
    }

    pub fn gamma1(&self) -> Result<CfgSchedule> {
        let g = &self.collection.gamma1;
        match g.mode.as_str() {
            "constant" => Ok(CfgSchedule::constant(g.front)),
            "triangular" => Ok(CfgSchedule::triangular(g.front, g.back)),
            other => Err(Error::Config(format!("unknown guidance mode {other:?}"))),
        }
    }

    pub fn collection(&self) -> Result<CollectionConfig> {
        let c = &self.collection;
        if c.n == 0 || c.n > self.schedule.steps {
            return Err(Error::Config(format!(
                "collection n must be in 1..={}, got {}",
                self.schedule.steps, c.n
            )));
        }
        Ok(CollectionConfig {
            n: c.n,
            gamma1: self.gamma1()?,
            gamma2: c.gamma2,
            kind: self.prediction()?,
            align: c.align,
        })
    }

    pub fn world(&self) -> Result<ToyWorld64> {
        let w = &self.world;
        ToyWorld64::from_spec(&ToyWorldSpec {
            channels: w.channels,
            height: w.height,
            width: w.width,
            num_views: w.views,
            view_shift: w.view_shift,
            amplitude: w.amplitude,
            components: w
                .components
                .iter()
                .map(|c| ComponentSpec {
                    seed: c.seed,
                    std: c.std,
                    weight: c.weight,
                })
                .collect(),
        })
    }

    pub fn metric(&self) -> Metric {
        Metric::SsimProxy {
            dynamic_range: self.filter.dynamic_range,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            lr: t.lr,
            batch_size: t.batch_size,
            decay: t.decay,
            decay_every: t.decay_every,
            epochs: t.epochs,
            seed: self.seed,
            shuffle: t.shuffle,
        })
    }

    pub fn edn_config(&self, noise_scale: f64, residual_scale: f64) -> Result<EdnConfig> {
        let upsample: Upsample = self.train.upsample.parse()?;
        Ok(EdnConfig::new(self.world.height, self.world.width, self.train.channels)
            .with_upsample(upsample)
            .with_scales(noise_scale, residual_scale))
    }

    pub fn verify_config(&self) -> Result<VerifyConfig> {
        Ok(VerifyConfig {
            seed: self.seed,
            draws: self.verify.draws,
            tolerance: self.verify.tolerance,
            schedule: self.schedule()?,
            n: self.collection.n.min(self.schedule.steps),
            coefficient_scale: self.verify.coefficient_scale,
            ..VerifyConfig::default()
        })
    }
}
