//! Double-branch discriminator: a shared shallow trunk `D_U` followed by a
//! photo branch `D_X` and an anime branch `D_Y`. An image is scored only by
//! the branch of its own domain.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stylefat_autograd::{Scalar, Tensor};

use crate::error::{ensure, Result};
use crate::layers::{act, global_avg_pool, Conv2d};
use crate::params::{ParamId, ParamStore};
use crate::types::{DomainTag, ImageBatch};

/// Trunk stages tapped by the feature-matching loss (scales 1 and 2).
pub const SHARED_TAPS: usize = 2;
/// Branch stages tapped by the domain-aware feature-matching loss (scale 3).
pub const BRANCH_TAPS: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    /// `false` keeps only the anime branch and routes both domains through it.
    pub double_branch: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            base_channels: 64,
            double_branch: true,
        }
    }
}

/// Global-average-pooled feature vectors `[N, C]`.
#[derive(Clone, Debug)]
pub struct FeatureTaps<T: Scalar> {
    /// Trunk taps at scales `K1 = {1, 2}`.
    pub shared: Vec<Tensor<T>>,
    /// Branch taps at scale `K2 = {3}`.
    pub branch: Vec<Tensor<T>>,
    /// Branch that produced `branch`.
    pub domain: DomainTag,
}

#[derive(Clone, Debug)]
pub struct DiscOutput<T: Scalar> {
    /// Patch scores averaged per sample, `[N]`.
    pub score: Tensor<T>,
    pub taps: FeatureTaps<T>,
}

#[derive(Clone, Debug)]
struct Branch {
    down: Conv2d,
    head: Conv2d,
}

#[derive(Clone, Debug)]
struct DiscArch {
    config: DiscriminatorConfig,
    trunk: Vec<Conv2d>,
    /// Indexed by [`DiscArch::branch_index`].
    branches: Vec<Branch>,
}

impl DiscArch {
    fn branch_index(&self, domain: DomainTag) -> usize {
        match (self.config.double_branch, domain) {
            (true, DomainTag::Photo) => 0,
            (true, DomainTag::Anime) => 1,
            (false, _) => 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator<T: Scalar> {
    arch: Arc<DiscArch>,
    params: ParamStore<T>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(config: &DiscriminatorConfig, seed: u64) -> Result<Self> {
        ensure!(config.base_channels >= 1, Config, "discriminator base_channels must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let d = config.base_channels;
        let trunk = vec![
            Conv2d::new(&mut store, rng, "d_u.stage1", 3, d, 4, 2, 1, true),
            Conv2d::new(&mut store, rng, "d_u.stage2", d, 2 * d, 4, 2, 1, true),
        ];
        let names: &[&str] = if config.double_branch {
            &["d_x", "d_y"]
        } else {
            &["d_y"]
        };
        let branches = names
            .iter()
            .map(|name| Branch {
                down: Conv2d::new(&mut store, rng, &format!("{name}.stage3"), 2 * d, 4 * d, 4, 2, 1, true),
                head: Conv2d::new(&mut store, rng, &format!("{name}.head"), 4 * d, 1, 3, 1, 1, true),
            })
            .collect();
        Ok(Discriminator {
            arch: Arc::new(DiscArch {
                config: config.clone(),
                trunk,
                branches,
            }),
            params: store,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.arch.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn with_params(&self, params: ParamStore<T>) -> Result<Self> {
        self.params.ensure_same_layout(&params)?;
        Ok(Discriminator {
            arch: Arc::clone(&self.arch),
            params,
        })
    }

    /// Parameter ids of the shared trunk.
    pub fn trunk_params(&self) -> Vec<ParamId> {
        self.arch.trunk.iter().flat_map(Conv2d::param_ids).collect()
    }

    /// Parameter ids of the branch that scores `domain`.
    pub fn branch_params(&self, domain: DomainTag) -> Vec<ParamId> {
        let b = &self.arch.branches[self.arch.branch_index(domain)];
        b.down.param_ids().into_iter().chain(b.head.param_ids()).collect()
    }

    /// Un-pooled trunk feature maps at scales 1 and 2.
    pub fn shared_features(&self, h: &ImageBatch<T>) -> Result<Vec<Tensor<T>>> {
        Ok(self.trunk_forward(h.tensor()))
    }

    /// Scores `h` with the branch of `domain` after one trunk pass.
    pub fn discriminate(&self, h: &ImageBatch<T>, domain: DomainTag) -> Result<DiscOutput<T>> {
        Ok(self.forward(h.tensor(), domain))
    }

    pub(crate) fn trunk_forward(&self, h: &Tensor<T>) -> Vec<Tensor<T>> {
        let mut maps = Vec::with_capacity(self.arch.trunk.len());
        let mut x = h.clone();
        for conv in &self.arch.trunk {
            x = act(&conv.forward(&self.params, &x));
            maps.push(x.clone());
        }
        maps
    }

    /// Branch applied to the last trunk map: returns (score, branch map).
    fn branch_forward(&self, trunk_out: &Tensor<T>, domain: DomainTag) -> (Tensor<T>, Tensor<T>) {
        let b = &self.arch.branches[self.arch.branch_index(domain)];
        let f = act(&b.down.forward(&self.params, trunk_out));
        let patches = b.head.forward(&self.params, &f);
        let n = patches.shape()[0];
        let score = patches.mean_axes_keepdim(&[1, 2, 3]).reshape(&[n]);
        (score, f)
    }

    pub(crate) fn forward(&self, h: &Tensor<T>, domain: DomainTag) -> DiscOutput<T> {
        let maps = self.trunk_forward(h);
        let (score, branch_map) = self.branch_forward(maps.last().expect("trunk has stages"), domain);
        DiscOutput {
            score,
            taps: FeatureTaps {
                shared: maps.iter().map(global_avg_pool).collect(),
                branch: vec![global_avg_pool(&branch_map)],
                domain,
            },
        }
    }

    /// Score only, for gradient penalties.
    pub(crate) fn score(&self, h: &Tensor<T>, domain: DomainTag) -> Tensor<T> {
        let maps = self.trunk_forward(h);
        self.branch_forward(maps.last().expect("trunk has stages"), domain).0
    }
}
