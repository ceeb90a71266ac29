use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SeqPolicy};
use crate::rng::substream_seed;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Depth,
    Width,
    #[default]
    SeqLength,
    Content,
    Composition,
    Grid,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Depth => "depth",
            Axis::Width => "width",
            Axis::SeqLength => "seq_length",
            Axis::Content => "content",
            Axis::Composition => "composition",
            Axis::Grid => "grid",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopsColumn {
    #[default]
    CSeq,
    CFull,
}

impl FlopsColumn {
    pub fn name(self) -> &'static str {
        match self {
            FlopsColumn::CSeq => "c_seq",
            FlopsColumn::CFull => "c_full",
        }
    }
}

/// Views/clicks and conversions quotas of a composed sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Allocation {
    pub views: usize,
    pub conversions: usize,
}

/// One sweep. Only the lists relevant to `axis` are read: depth uses
/// `depths`, width `widths`, seq_length `lengths`, content `depths` x
/// {id only, with content}, composition `allocations`, grid `depths` x `widths`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub axis: Axis,
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    pub lengths: Vec<usize>,
    pub allocations: Vec<Allocation>,
    /// Replicate indices; each maps to its own init/shuffle seed.
    pub seeds: Vec<u64>,
    /// Config id used as the ΔNE reference; defaults to the axis' natural
    /// reference (the first, smallest config, or the balanced allocation).
    pub baseline: Option<String>,
    pub flops_column: FlopsColumn,
    /// Sequence selection of the base model.
    pub policy: SeqPolicy,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            axis: Axis::default(),
            depths: vec![1, 2, 4],
            widths: vec![16, 32, 64],
            lengths: vec![64, 128, 256, 512],
            allocations: vec![
                Allocation { views: 64, conversions: 0 },
                Allocation { views: 32, conversions: 32 },
                Allocation { views: 0, conversions: 64 },
            ],
            seeds: vec![0, 1, 2],
            baseline: None,
            flops_column: FlopsColumn::default(),
            policy: SeqPolicy::default(),
        }
    }
}

/// A concrete configuration of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub id: String,
    pub model: ModelConfig,
}

impl RunConfig {
    pub fn new(model: ModelConfig) -> Self {
        let s = &model.seq;
        let policy = match model.policy {
            SeqPolicy::Recent { length } => format!("T{length}"),
            SeqPolicy::Compose { views, conversions } => format!("V{views}C{conversions}"),
        };
        let id = format!("L{}-d{}-{policy}-{}", s.layers, s.d_model, if s.use_content { "content" } else { "id" });
        Self { id, model }
    }
}

/// Trainer seed of replicate `r` under the run seed.
pub fn replicate_seed(seed: u64, r: u64) -> u64 {
    substream_seed(seed, &format!("replicate{r}"))
}

fn with_depth(mut m: ModelConfig, l: usize) -> ModelConfig {
    m.seq.layers = l;
    m.seq.schedule = None;
    m
}

fn with_width(mut m: ModelConfig, d: usize) -> ModelConfig {
    m.seq.d_model = d;
    m.seq.latent_dim = m.seq.latent_dim.min(d);
    m.seq.time_dims = None;
    m
}

impl ExperimentSpec {
    fn axis_values(&self) -> (&'static str, bool) {
        match self.axis {
            Axis::Depth => ("depths", self.depths.is_empty()),
            Axis::Width => ("widths", self.widths.is_empty()),
            Axis::SeqLength => ("lengths", self.lengths.is_empty()),
            Axis::Content => ("depths", self.depths.is_empty()),
            Axis::Composition => ("allocations", self.allocations.is_empty()),
            Axis::Grid => ("depths/widths", self.depths.is_empty() || self.widths.is_empty()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (name, empty) = self.axis_values();
        if empty {
            return Err(Error::Config(format!("experiment.{name} must be nonempty for axis {}", self.axis.name())));
        }
        let ascending = |v: &[usize]| v.windows(2).all(|w| w[0] < w[1]);
        for (name, v) in [("depths", &self.depths), ("widths", &self.widths), ("lengths", &self.lengths)] {
            if !ascending(v) {
                return Err(Error::Config(format!("experiment.{name} must be strictly ascending")));
            }
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() < 3 || seeds.len() != self.seeds.len() {
            return Err(Error::Config("experiment.seeds needs at least 3 distinct replicates".into()));
        }
        Ok(())
    }

    /// Sweep configurations derived from `base`, in axis order.
    pub fn configs(&self, base: &ModelConfig) -> Result<Vec<RunConfig>> {
        self.validate()?;
        let base = ModelConfig {
            policy: self.policy.clone(),
            ..base.clone()
        };
        let models: Vec<ModelConfig> = match self.axis {
            Axis::Depth => self.depths.iter().map(|&l| with_depth(base.clone(), l)).collect(),
            Axis::Width => self.widths.iter().map(|&d| with_width(base.clone(), d)).collect(),
            Axis::SeqLength => self
                .lengths
                .iter()
                .map(|&t| ModelConfig {
                    policy: SeqPolicy::Recent { length: t },
                    ..base.clone()
                })
                .collect(),
            Axis::Content => self
                .depths
                .iter()
                .flat_map(|&l| {
                    [false, true].map(|c| {
                        let mut m = with_depth(base.clone(), l);
                        m.seq.use_content = c;
                        m
                    })
                })
                .collect(),
            Axis::Composition => self
                .allocations
                .iter()
                .map(|a| ModelConfig {
                    policy: SeqPolicy::Compose {
                        views: a.views,
                        conversions: a.conversions,
                    },
                    ..base.clone()
                })
                .collect(),
            Axis::Grid => self
                .depths
                .iter()
                .flat_map(|&l| self.widths.iter().map(move |&d| (l, d)))
                .map(|(l, d)| with_width(with_depth(base.clone(), l), d))
                .collect(),
        };
        let configs: Vec<RunConfig> = models.into_iter().map(RunConfig::new).collect();
        for (i, c) in configs.iter().enumerate() {
            c.model.seq.validate()?;
            if configs[..i].iter().any(|o| o.id == c.id) {
                return Err(Error::Config(format!("experiment produces duplicate config {}", c.id)));
            }
        }
        Ok(configs)
    }

    /// Id of the ΔNE reference among `configs`.
    pub fn baseline_id(&self, configs: &[RunConfig]) -> Result<String> {
        if let Some(b) = &self.baseline {
            return if configs.iter().any(|c| &c.id == b) {
                Ok(b.clone())
            } else {
                Err(Error::Config(format!("experiment.baseline {b} is not part of the sweep")))
            };
        }
        if self.axis == Axis::Composition {
            let balanced = self
                .allocations
                .iter()
                .position(|a| a.views == a.conversions)
                .ok_or_else(|| Error::Config("composition sweeps need a balanced allocation".into()))?;
            return Ok(configs[balanced].id.clone());
        }
        Ok(configs[0].id.clone())
    }
}
