//! Run configuration and ablation variants.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::discriminator::DiscriminatorConfig;
use crate::error::{ensure, Error, Result};
use crate::generator::{AdaPolinMode, GeneratorConfig, PolinMode};
use crate::losses::{AdvForm, LossWeights};

/// Every knob of a training run, flat so that a TOML file and `key=value`
/// overrides address the same names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub photo_dir: PathBuf,
    pub anime_dir: PathBuf,
    pub output_dir: PathBuf,
    pub image_size: usize,
    pub batch_size: usize,
    pub iterations: u64,
    pub learning_rate: f64,
    pub rmsprop_alpha: f64,
    pub rmsprop_eps: f64,
    pub lambda_rec: f64,
    pub lambda_fm: f64,
    pub r1_gamma: f64,
    pub adv_form: AdvForm,
    pub ema_weight: f64,
    pub seed: u64,
    /// Random horizontal flips with probability 1/2.
    pub hflip: bool,
    pub base_channels: usize,
    pub bottleneck_channels: usize,
    pub asc_depth: usize,
    pub style_dim: usize,
    pub disc_channels: usize,
    pub use_asc: bool,
    pub use_fst_style_injection: bool,
    pub bottleneck_style_injection: bool,
    pub double_branch: bool,
    pub polin_mode: PolinMode,
    pub adapolin_mode: AdaPolinMode,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    /// Steps between CSV rows.
    pub log_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        let d = DiscriminatorConfig::default();
        let w = LossWeights::face2anime();
        TrainConfig {
            photo_dir: PathBuf::from("data/trainA"),
            anime_dir: PathBuf::from("data/trainB"),
            output_dir: PathBuf::from("runs/default"),
            image_size: g.image_size,
            batch_size: 4,
            iterations: 100_000,
            learning_rate: 1e-4,
            rmsprop_alpha: 0.99,
            rmsprop_eps: 1e-8,
            lambda_rec: w.lambda_rec,
            lambda_fm: w.lambda_fm,
            r1_gamma: w.r1_gamma,
            adv_form: AdvForm::Hinge,
            ema_weight: 0.001,
            seed: 0,
            hflip: true,
            base_channels: g.base_channels,
            bottleneck_channels: g.bottleneck_channels,
            asc_depth: g.asc_depth,
            style_dim: g.style_dim,
            disc_channels: d.base_channels,
            use_asc: g.use_asc,
            use_fst_style_injection: g.use_fst_style_injection,
            bottleneck_style_injection: g.bottleneck_style_injection,
            double_branch: d.double_branch,
            polin_mode: g.polin_mode,
            adapolin_mode: g.adapolin_mode,
            checkpoint_interval: 1000,
            log_interval: 1,
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset: 64x64 images, batch 4, narrow networks and at
    /// most 2000 steps. Optimizer and loss settings keep their defaults.
    pub fn smoke() -> Self {
        TrainConfig {
            image_size: 64,
            iterations: 2000,
            base_channels: 16,
            bottleneck_channels: 64,
            asc_depth: 2,
            style_dim: 64,
            disc_channels: 16,
            checkpoint_interval: 500,
            ..Self::default()
        }
    }

    pub fn selfie2anime() -> Self {
        TrainConfig {
            lambda_rec: LossWeights::selfie2anime().lambda_rec,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, Config, "batch_size must be at least 1");
        ensure!(
            self.ema_weight > 0.0 && self.ema_weight < 1.0,
            Config,
            "ema_weight must be in (0, 1), got {}",
            self.ema_weight
        );
        ensure!(
            self.learning_rate >= 0.0 && self.learning_rate.is_finite(),
            Config,
            "learning_rate must be finite and non-negative, got {}",
            self.learning_rate
        );
        ensure!(
            (0.0..1.0).contains(&self.rmsprop_alpha) && self.rmsprop_eps > 0.0,
            Config,
            "rmsprop_alpha must be in [0, 1) and rmsprop_eps positive"
        );
        ensure!(self.log_interval >= 1, Config, "log_interval must be at least 1");
        self.loss_weights().validate()?;
        self.generator_config().validate()?;
        ensure!(self.disc_channels >= 1, Config, "disc_channels must be positive");
        Ok(())
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            image_size: self.image_size,
            base_channels: self.base_channels,
            bottleneck_channels: self.bottleneck_channels,
            asc_depth: self.asc_depth,
            fst_count: 2,
            style_dim: self.style_dim,
            use_asc: self.use_asc,
            use_fst_style_injection: self.use_fst_style_injection,
            bottleneck_style_injection: self.bottleneck_style_injection,
            polin_mode: self.polin_mode,
            adapolin_mode: self.adapolin_mode,
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            base_channels: self.disc_channels,
            double_branch: self.double_branch,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_rec: self.lambda_rec,
            lambda_fm: self.lambda_fm,
            r1_gamma: self.r1_gamma,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Sets one field from its textual value, e.g. `("lambda_rec", "2.0")`.
    /// The value is parsed as a TOML literal, falling back to a string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let toml::Value::Table(mut table) = toml::Value::try_from(&*self)
            .map_err(|e| Error::Config(e.to_string()))?
        else {
            unreachable!("config serializes to a table");
        };
        ensure!(
            table.contains_key(key),
            Config,
            "unknown config field `{key}`"
        );
        let parsed = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        table.insert(key.to_string(), parsed);
        *self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("bad value for `{key}`: {e}")))?;
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// One-line summary of the architecture switches.
    pub fn switch_summary(&self) -> String {
        let on = |b: bool| if b { "on" } else { "off" };
        format!(
            "asc={} fst_style={} bottleneck_style={} double_branch={} polin_mode={} adapolin_mode={}",
            on(self.use_asc),
            on(self.use_fst_style_injection),
            on(self.bottleneck_style_injection),
            on(self.double_branch),
            enum_name(&self.polin_mode),
            enum_name(&self.adapolin_mode),
        )
    }
}

fn enum_name<E: Serialize>(e: &E) -> String {
    serde_json::to_value(e)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

/// The seven single-switch ablations of the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Residual blocks instead of the ASC block.
    NoAsc,
    /// Plain upsampling blocks instead of FST blocks.
    NoFst,
    /// Single-branch discriminator.
    NoDb,
    /// IN in place of PoLIN.
    In,
    /// LIN in place of PoLIN.
    Lin,
    /// AdaIN in place of AdaPoLIN.
    AdaIn,
    /// AdaLIN in place of AdaPoLIN.
    AdaLin,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::NoAsc,
        Variant::NoFst,
        Variant::NoDb,
        Variant::In,
        Variant::Lin,
        Variant::AdaIn,
        Variant::AdaLin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NoAsc => "no_asc",
            Variant::NoFst => "no_fst",
            Variant::NoDb => "no_db",
            Variant::In => "in",
            Variant::Lin => "lin",
            Variant::AdaIn => "adain",
            Variant::AdaLin => "adalin",
        }
    }

    pub fn apply(self, config: &mut TrainConfig) {
        match self {
            Variant::NoAsc => config.use_asc = false,
            Variant::NoFst => config.use_fst_style_injection = false,
            Variant::NoDb => config.double_branch = false,
            Variant::In => config.polin_mode = PolinMode::In,
            Variant::Lin => config.polin_mode = PolinMode::Lin,
            Variant::AdaIn => config.adapolin_mode = AdaPolinMode::Adain,
            Variant::AdaLin => config.adapolin_mode = AdaPolinMode::Adalin,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant `{s}`, expected one of {}", names.join(", ")))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_typed_values_and_reject_unknown_keys() {
        let mut c = TrainConfig::default();
        c.apply_overrides(&["lambda_rec=2.5", "double_branch=false", "polin_mode=lin", "seed=9"])
            .unwrap();
        assert_eq!(c.lambda_rec, 2.5);
        assert!(!c.double_branch);
        assert_eq!(c.polin_mode, PolinMode::Lin);
        assert_eq!(c.seed, 9);
        c.set("output_dir", "some/dir").unwrap();
        assert_eq!(c.output_dir, PathBuf::from("some/dir"));
        assert!(matches!(c.set("lambda_foo", "1"), Err(Error::Config(_))));
        assert!(matches!(c.set("batch_size", "many"), Err(Error::Config(_))));
    }

    #[test]
    fn toml_round_trip() {
        let c = TrainConfig::smoke();
        assert_eq!(TrainConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
        let partial = TrainConfig::from_toml_str("batch_size = 2\n").unwrap();
        assert_eq!(partial.batch_size, 2);
        assert!(TrainConfig::from_toml_str("bogus = 1\n").is_err());
    }

    #[test]
    fn variants_touch_exactly_one_switch() {
        let base = TrainConfig::default();
        for v in Variant::ALL {
            let mut c = base.clone();
            v.apply(&mut c);
            assert_ne!(c.switch_summary(), base.switch_summary(), "{v}");
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }
}
