//! Alternating discriminator/generator optimization with a moving-average
//! generator, checkpointing and CSV loss logging.

mod checkpoint;
mod config;
mod data;
mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};

use stylefat_autograd::{grad, Scalar, Tensor};

use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::losses::{discriminator_objective, generator_objective, LossReport};
use crate::types::{DomainTag, UnpairedBatch};

pub use checkpoint::{load_checkpoint, save_checkpoint, FORMAT_VERSION};
pub use config::{TrainConfig, Variant};
pub use data::{
    image_to_planar, load_dataset, load_image, planar_to_image, synthetic_faces, write_synthetic_faces, Dataset,
    DatasetLayout, Sampler,
};
pub use optim::{ema_update, RmsProp};

/// Mixes several integers into one well-spread 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    // splitmix64 finalizer applied after each part
    parts.iter().fold(0x9e37_79b9_7f4a_7c15u64, |acc, &p| {
        let mut z = acc ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(acc << 6);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    })
}

/// Everything needed to continue training.
#[derive(Clone, Debug)]
pub struct TrainState<T: Scalar> {
    pub config: TrainConfig,
    /// Completed training steps.
    pub iteration: u64,
    pub generator: Generator<T>,
    /// Moving average of `generator`; the exported inference model.
    pub ema: Generator<T>,
    pub discriminator: Discriminator<T>,
    pub opt_g: RmsProp<T>,
    pub opt_d: RmsProp<T>,
}

fn check_finite(report: &LossReport, phase: &str) -> Result<()> {
    match report.first_non_finite() {
        Some(name) => Err(Error::Numeric(format!(
            "{phase} step produced a non-finite `{name}` loss ({report:?})"
        ))),
        None => Ok(()),
    }
}

fn check_grads<T: Scalar>(grads: &[Tensor<T>], phase: &str) -> Result<()> {
    if grads.iter().all(Tensor::all_finite) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{phase} step produced non-finite gradients")))
    }
}

impl<T: Scalar> TrainState<T> {
    /// Fresh state at iteration 0; the EMA generator starts as a copy.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(&config.generator_config(), derive_seed(&[config.seed, 10]))?;
        let discriminator =
            Discriminator::new(&config.discriminator_config(), derive_seed(&[config.seed, 11]))?;
        let opt = |p| RmsProp::new(p, config.learning_rate, config.rmsprop_alpha, config.rmsprop_eps);
        Ok(TrainState {
            config: config.clone(),
            iteration: 0,
            opt_g: opt(generator.params()),
            opt_d: opt(discriminator.params()),
            ema: generator.clone(),
            generator,
            discriminator,
        })
    }

    pub fn sampler(&self) -> Sampler {
        Sampler {
            seed: self.config.seed,
            batch_size: self.config.batch_size,
            hflip: self.config.hflip,
        }
    }

    /// The batch scheduled for the next step.
    pub fn next_batch(&self, photos: &Dataset, anime: &Dataset) -> Result<UnpairedBatch<T>> {
        let s = self.sampler();
        UnpairedBatch::new(
            s.batch(photos, DomainTag::Photo, self.iteration)?,
            s.batch(anime, DomainTag::Anime, self.iteration)?,
        )
    }

    /// One discriminator update, one generator update, then the EMA update.
    /// Nothing is modified if either objective is non-finite.
    pub fn train_step(&mut self, batch: &UnpairedBatch<T>) -> Result<LossReport> {
        let form = self.config.adv_form;
        let weights = self.config.loss_weights();

        let d_obj = discriminator_objective(&self.generator, &self.discriminator, batch, &weights, form)?;
        check_finite(&d_obj.report, "discriminator")?;
        let d_grads = grad(&d_obj.total, &self.discriminator.params().tensors(), false);
        drop(d_obj.total);
        check_grads(&d_grads, "discriminator")?;

        // the generator objective is evaluated against the updated
        // discriminator, so the update can only be committed afterwards
        let mut disc = self.discriminator.clone();
        let mut opt_d = self.opt_d.clone();
        opt_d.step(disc.params_mut(), &d_grads)?;

        let g_obj = generator_objective(&self.generator, &disc, batch, &weights, form)?;
        check_finite(&g_obj.report, "generator")?;
        let g_grads = grad(&g_obj.total, &self.generator.params().tensors(), false);
        drop(g_obj.total);
        check_grads(&g_grads, "generator")?;

        self.discriminator = disc;
        self.opt_d = opt_d;
        self.opt_g.step(self.generator.params_mut(), &g_grads)?;
        ema_update(self.ema.params_mut(), self.generator.params(), self.config.ema_weight)?;
        self.iteration += 1;

        Ok(LossReport {
            adv_d: d_obj.report.adv_d,
            r1: d_obj.report.r1,
            total_d: d_obj.report.total_d,
            ..g_obj.report
        })
    }

    /// Samples the scheduled batch and trains on it.
    pub fn step_on(&mut self, photos: &Dataset, anime: &Dataset) -> Result<LossReport> {
        let batch = self.next_batch(photos, anime)?;
        self.train_step(&batch)
    }
}

/// Files produced by a run inside `output_dir`.
pub struct RunPaths {
    pub log: PathBuf,
    pub checkpoint: PathBuf,
    pub config: PathBuf,
}

impl RunPaths {
    pub fn new(output_dir: &Path) -> Self {
        RunPaths {
            log: output_dir.join("losses.csv"),
            checkpoint: output_dir.join("checkpoint.bin"),
            config: output_dir.join("config.toml"),
        }
    }
}

/// Keeps the header and rows with `iter <= last`, so a resumed run continues
/// the log exactly where its checkpoint left off.
fn prepare_log(path: &Path, last: u64) -> Result<()> {
    let mut text = String::from(LossReport::CSV_HEADER);
    text.push('\n');
    if last > 0 {
        if let Ok(old) = std::fs::read_to_string(path) {
            for line in old.lines().skip(1) {
                let iter = line.split(',').next().and_then(|f| f.parse::<u64>().ok());
                if matches!(iter, Some(i) if i <= last) {
                    text.push_str(line);
                    text.push('\n');
                }
            }
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains `state` on the given data until `state.config.iterations`,
/// writing the CSV log, periodic checkpoints and a final checkpoint into
/// `state.config.output_dir`. `on_step` sees every report.
pub fn fit_from<T: Scalar>(
    state: &mut TrainState<T>,
    photos: &Dataset,
    anime: &Dataset,
    mut on_step: impl FnMut(u64, &LossReport),
) -> Result<()> {
    let cfg = state.config.clone();
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let paths = RunPaths::new(&cfg.output_dir);
    std::fs::write(&paths.config, cfg.to_toml_string()).map_err(|e| Error::io(&paths.config, e))?;
    prepare_log(&paths.log, state.iteration)?;
    let mut log = std::fs::OpenOptions::new()
        .append(true)
        .open(&paths.log)
        .map_err(|e| Error::io(&paths.log, e))?;
    log::info!("switches: {}", cfg.switch_summary());

    while state.iteration < cfg.iterations {
        let report = state.step_on(photos, anime)?;
        let it = state.iteration;
        if it % cfg.log_interval == 0 {
            writeln!(log, "{}", report.to_csv_row(it)).map_err(|e| Error::io(&paths.log, e))?;
        }
        if it % 100 == 0 {
            log::info!("iter {it}: total_g {:.4} total_d {:.4} rec {:.4}", report.total_g, report.total_d, report.rec);
        }
        on_step(it, &report);
        if cfg.checkpoint_interval > 0 && it % cfg.checkpoint_interval == 0 && it < cfg.iterations {
            save_checkpoint(state, &paths.checkpoint)?;
        }
    }
    log.flush().map_err(|e| Error::io(&paths.log, e))?;
    save_checkpoint(state, &paths.checkpoint)
}

/// Loads both image folders and trains from scratch, or from `resume`.
pub fn fit(config: &TrainConfig, resume: Option<&Path>) -> Result<TrainState<f32>> {
    config.validate()?;
    let photos = load_dataset(&config.photo_dir, config.image_size)?;
    let anime = load_dataset(&config.anime_dir, config.image_size)?;
    let mut state = match resume {
        Some(path) => {
            let mut s = load_checkpoint::<f32>(path)?;
            if s.config.generator_config() != config.generator_config()
                || s.config.discriminator_config() != config.discriminator_config()
            {
                return Err(Error::Config(
                    "checkpoint architecture differs from the requested configuration".into(),
                ));
            }
            s.config = config.clone();
            s
        }
        None => TrainState::new(config)?,
    };
    fit_from(&mut state, &photos, &anime, |_, _| {})?;
    Ok(state)
}
