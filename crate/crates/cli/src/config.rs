//! Experiment configuration as plain `key = value` text.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use hashlab_core::nn::TrainSchedule;
use hashlab_core::arch::LayerSpec;
use hashlab_core::{parse_arch, ArchSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dataset {
    Mnist,
    Cifar10,
}

impl Dataset {
    pub fn name(self) -> &'static str {
        match self {
            Dataset::Mnist => "mnist",
            Dataset::Cifar10 => "cifar10",
        }
    }

    /// Architecture template; the knob width is replaced by the code length.
    pub fn default_arch(self) -> &'static str {
        match self {
            Dataset::Mnist => "1x28x28-32C5P0-MP2S2-32C5P0-MP2S2-H32-D0.5-H10",
            Dataset::Cifar10 => {
                "3x32x32-32C3P1-32C1P0-MP3S2-D0.5-32C3P1-32C3P1-MP3S2-D0.5-64C3P1-64C3P1-MP3S2-D0.5-H32-D0.5-H10"
            }
        }
    }

    pub fn schedule(self) -> TrainSchedule {
        match self {
            Dataset::Mnist => TrainSchedule::mnist(),
            Dataset::Cifar10 => TrainSchedule::cifar10(),
        }
    }

    /// Drop probability after the knob for a given code length.
    pub fn knob_dropout(self, bits: usize) -> f64 {
        match self {
            Dataset::Mnist => 0.5,
            Dataset::Cifar10 => match bits {
                0..=8 => 0.0,
                9..=12 => 0.2,
                13..=16 => 0.3,
                _ => 0.5,
            },
        }
    }

    pub fn subdir(self) -> &'static str {
        match self {
            Dataset::Mnist => "mnist",
            Dataset::Cifar10 => "cifar-10-batches-bin",
        }
    }
}

impl FromStr for Dataset {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(Dataset::Mnist),
            "cifar10" | "cifar-10" | "cifar" => Ok(Dataset::Cifar10),
            _ => bail!("unknown dataset `{s}` (expected mnist or cifar10)"),
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    /// Knob activations thresholded at zero.
    Cnnbh,
    /// Gaussian random projections of the normalized pixels.
    LshPixels,
    /// Euclidean ranking on raw knob activations.
    L2Fc,
    /// Euclidean ranking on rectified knob activations.
    L2FcPlus,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Cnnbh, Method::LshPixels, Method::L2Fc, Method::L2FcPlus];

    pub fn name(self) -> &'static str {
        match self {
            Method::Cnnbh => "CNNBH",
            Method::LshPixels => "LSH_pixels",
            Method::L2Fc => "L2_fc",
            Method::L2FcPlus => "L2_fc_plus",
        }
    }

    pub fn needs_model(self) -> bool {
        self != Method::LshPixels
    }

    pub fn is_binary(self) -> bool {
        matches!(self, Method::Cnnbh | Method::LshPixels)
    }
}

impl FromStr for Method {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s) || (s.eq_ignore_ascii_case("L2_fc+") && *m == Method::L2FcPlus))
            .ok_or_else(|| anyhow!("unknown method `{s}` (expected CNNBH, LSH_pixels, L2_fc or L2_fc_plus)"))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

pub fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<T>().map_err(|e| anyhow!("`{t}`: {e}")))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: Dataset,
    /// Architecture template; `None` uses the dataset default.
    pub arch: Option<String>,
    pub bits: Vec<usize>,
    /// Drop probability after the knob; `None` picks it from the code length.
    pub dropout: Option<f64>,
    /// Overrides the schedule length, scaling its phase boundaries.
    pub epochs: Option<usize>,
    pub seed: u64,
    pub lsh_seed: u64,
    pub n_query: usize,
    pub n_train: usize,
    pub balanced: bool,
    pub methods: Vec<Method>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub radius: u32,
    pub cv_folds: usize,
    pub out: PathBuf,
}

impl ExperimentConfig {
    pub fn new(dataset: Dataset) -> Self {
        ExperimentConfig {
            dataset,
            arch: None,
            bits: vec![12, 24, 32, 48],
            dropout: None,
            epochs: None,
            seed: 1,
            lsh_seed: 7,
            n_query: 1000,
            n_train: 5000,
            balanced: true,
            methods: Method::ALL.to_vec(),
            learning_rate: None,
            momentum: None,
            weight_decay: None,
            batch_size: None,
            radius: 2,
            cv_folds: 0,
            out: PathBuf::from("runs").join(dataset.name()),
        }
    }

    pub fn arch_template(&self) -> &str {
        self.arch.as_deref().unwrap_or(self.dataset.default_arch())
    }

    pub fn knob_dropout(&self, bits: usize) -> f64 {
        self.dropout.unwrap_or_else(|| self.dataset.knob_dropout(bits))
    }

    /// The template with its knob resized to `bits` and the matching dropout.
    pub fn arch_for(&self, bits: usize) -> Result<ArchSpec> {
        let template = parse_arch(self.arch_template()).context("architecture")?;
        Ok(template.with_knob(bits, self.knob_dropout(bits))?)
    }

    pub fn schedule(&self) -> TrainSchedule {
        let mut s = self.dataset.schedule();
        if let Some(e) = self.epochs {
            s = s.scaled_to(e);
        }
        s.seed = self.seed;
        if let Some(v) = self.learning_rate {
            s.initial_lr = v;
        }
        if let Some(v) = self.momentum {
            s.momentum = v;
        }
        if let Some(v) = self.weight_decay {
            s.weight_decay = v;
        }
        if let Some(v) = self.batch_size {
            s.batch_size = v;
        }
        s
    }

    /// The schedule with its weight sigmas fitted to `arch`. A per-layer
    /// sigma list written for the default architecture is mapped by layer
    /// role when `arch` has a different number of weight layers: the first
    /// entry goes to every convolution, the second-to-last to the knob and
    /// the last to the fully connected layers after it.
    pub fn schedule_for(&self, arch: &ArchSpec) -> TrainSchedule {
        let mut s = self.schedule();
        let sigmas = &s.init_sigmas;
        let weighted: Vec<(usize, &LayerSpec)> = arch
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Conv { .. } | LayerSpec::FullyConnected { .. }))
            .collect();
        if sigmas.len() > 1 && sigmas.len() != weighted.len() {
            let knob = arch.knob_index();
            let n = sigmas.len();
            s.init_sigmas = weighted
                .iter()
                .map(|&(i, l)| match l {
                    LayerSpec::Conv { .. } => sigmas[0],
                    _ if Some(i) == knob => sigmas[n - 2],
                    _ => sigmas[n - 1],
                })
                .collect();
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits.is_empty() {
            bail!("no code lengths requested");
        }
        if self.bits.contains(&0) {
            bail!("code lengths must be positive");
        }
        if self.methods.is_empty() {
            bail!("no methods requested");
        }
        if let Some(p) = self.dropout {
            if !(0.0..1.0).contains(&p) {
                bail!("dropout must lie in [0, 1)");
            }
        }
        for &b in &self.bits {
            let arch = self.arch_for(b).with_context(|| format!("{b}-bit architecture"))?;
            self.schedule_for(&arch).validate()?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_default();
        let join = |v: Vec<String>| v.join(",");
        let lines = [
            ("dataset", self.dataset.to_string()),
            ("arch", self.arch_template().to_string()),
            ("bits", join(self.bits.iter().map(ToString::to_string).collect())),
            ("dropout", opt(self.dropout.map(|v| v.to_string()))),
            ("epochs", opt(self.epochs.map(|v| v.to_string()))),
            ("seed", self.seed.to_string()),
            ("lsh_seed", self.lsh_seed.to_string()),
            ("n_query", self.n_query.to_string()),
            ("n_train", self.n_train.to_string()),
            ("balanced", self.balanced.to_string()),
            ("methods", join(self.methods.iter().map(ToString::to_string).collect())),
            ("learning_rate", opt(self.learning_rate.map(|v| v.to_string()))),
            ("momentum", opt(self.momentum.map(|v| v.to_string()))),
            ("weight_decay", opt(self.weight_decay.map(|v| v.to_string()))),
            ("batch_size", opt(self.batch_size.map(|v| v.to_string()))),
            ("radius", self.radius.to_string()),
            ("cv_folds", self.cv_folds.to_string()),
            ("out", self.out.display().to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Parses `key = value` lines; `#` starts a comment, empty values mean
    /// "use the default". `dataset` must come first when present.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg: Option<ExperimentConfig> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", n + 1))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "dataset" {
                if cfg.is_some() {
                    bail!("line {}: `dataset` must be the first key", n + 1);
                }
                cfg = Some(ExperimentConfig::new(value.parse()?));
                continue;
            }
            let c = cfg.get_or_insert_with(|| ExperimentConfig::new(Dataset::Mnist));
            c.set(key, value).with_context(|| format!("line {}", n + 1))?;
        }
        cfg.ok_or_else(|| anyhow!("empty configuration"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_text(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn opt<T: FromStr>(v: &str) -> Result<Option<T>>
        where
            T::Err: fmt::Display,
        {
            if v.is_empty() {
                Ok(None)
            } else {
                v.parse().map(Some).map_err(|e| anyhow!("`{v}`: {e}"))
            }
        }
        fn req<T: FromStr>(v: &str) -> Result<T>
        where
            T::Err: fmt::Display,
        {
            v.parse().map_err(|e| anyhow!("`{v}`: {e}"))
        }
        match key {
            "arch" => self.arch = (!value.is_empty()).then(|| value.to_string()),
            "bits" => self.bits = parse_list(value)?,
            "dropout" => self.dropout = opt(value)?,
            "epochs" => self.epochs = opt(value)?,
            "seed" => self.seed = req(value)?,
            "lsh_seed" => self.lsh_seed = req(value)?,
            "n_query" => self.n_query = req(value)?,
            "n_train" => self.n_train = req(value)?,
            "balanced" => self.balanced = req(value)?,
            "methods" => self.methods = parse_list(value)?,
            "learning_rate" => self.learning_rate = opt(value)?,
            "momentum" => self.momentum = opt(value)?,
            "weight_decay" => self.weight_decay = opt(value)?,
            "batch_size" => self.batch_size = opt(value)?,
            "radius" => self.radius = req(value)?,
            "cv_folds" => self.cv_folds = req(value)?,
            "out" => self.out = PathBuf::from(value),
            _ => bail!("unknown key `{key}`"),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropout_by_length() {
        let table: Vec<f64> = [8, 12, 16, 24, 32, 40, 48]
            .iter()
            .map(|&b| Dataset::Cifar10.knob_dropout(b))
            .collect();
        assert_eq!(table, vec![0.0, 0.2, 0.3, 0.5, 0.5, 0.5, 0.5]);
        assert_eq!(Dataset::Mnist.knob_dropout(8), 0.5);
    }

    #[test]
    fn knob_follows_bits() {
        let cfg = ExperimentConfig::new(Dataset::Cifar10);
        assert_eq!(
            cfg.arch_for(16).unwrap().to_string(),
            "3x32x32-32C3P1-32C1P0-MP3S2-D0.5-32C3P1-32C3P1-MP3S2-D0.5-64C3P1-64C3P1-MP3S2-D0.5-H16-D0.3-H10"
        );
        assert_eq!(cfg.arch_for(8).unwrap().knob_width(), Some(8));
        let mnist = ExperimentConfig::new(Dataset::Mnist);
        assert_eq!(
            mnist.arch_for(48).unwrap().to_string(),
            "1x28x28-32C5P0-MP2S2-32C5P0-MP2S2-H48-D0.5-H10"
        );
    }

    #[test]
    fn sigmas_follow_layer_roles() {
        let mut cfg = ExperimentConfig::new(Dataset::Mnist);
        let default = cfg.schedule_for(&cfg.arch_for(12).unwrap());
        assert_eq!(default.init_sigmas, vec![0.2, 0.2, 0.01, 0.1]);
        cfg.arch = Some("1x10x10-4C3P1-4C3P1-MP2S2-4C3P1-H16-H20-H10".into());
        let s = cfg.schedule_for(&cfg.arch_for(8).unwrap());
        assert_eq!(s.init_sigmas, vec![0.2, 0.2, 0.2, 0.01, 0.1, 0.1]);
        let cifar = ExperimentConfig::new(Dataset::Cifar10);
        assert_eq!(cifar.schedule_for(&cifar.arch_for(8).unwrap()).init_sigmas, vec![0.04]);
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = ExperimentConfig::new(Dataset::Cifar10);
        cfg.epochs = Some(100);
        cfg.methods = vec![Method::Cnnbh, Method::L2FcPlus];
        cfg.dropout = Some(0.25);
        let back = ExperimentConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back.arch_template(), cfg.arch_template());
        assert_eq!(
            ExperimentConfig { arch: None, ..back },
            ExperimentConfig { arch: None, ..cfg }
        );
        assert!(ExperimentConfig::from_text("bits = 12\ndataset = mnist").is_err());
        assert!(ExperimentConfig::from_text("dataset = mnist\nfoo = 1").is_err());
    }

    #[test]
    fn schedule_overrides() {
        let mut cfg = ExperimentConfig::new(Dataset::Mnist);
        cfg.epochs = Some(15);
        cfg.seed = 9;
        let s = cfg.schedule();
        assert_eq!((s.total_epochs, s.boundaries.clone(), s.seed), (15, vec![8, 11], 9));
        assert_eq!("l2_fc+".parse::<Method>().unwrap(), Method::L2FcPlus);
        assert!("gist".parse::<Method>().is_err());
    }
}
