//! Training objectives.
//!
//! All L1 terms are mean-reduced so loss weights do not depend on
//! resolution or feature width. Terms defined as an expectation over images
//! of both domains average the photo and anime contributions; the
//! adversarial term sums its two translation directions.

use serde::{Deserialize, Serialize};
use stylefat_autograd::{grad, no_grad, Scalar, Tensor};

use crate::discriminator::{Discriminator, FeatureTaps};
use crate::error::{ensure, Error, Result};
use crate::generator::Generator;
use crate::types::{DomainTag, ImageBatch, UnpairedBatch};

/// Adversarial loss family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvForm {
    /// Margin loss actually used for training.
    Hinge,
    /// Saturating `log D + log(1 - D)` form with `D = sigmoid(score)`.
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_fm: f64,
    pub r1_gamma: f64,
}

impl LossWeights {
    pub fn face2anime() -> Self {
        LossWeights {
            lambda_rec: 1.2,
            lambda_fm: 1.0,
            r1_gamma: 10.0,
        }
    }

    pub fn selfie2anime() -> Self {
        LossWeights {
            lambda_rec: 2.0,
            ..Self::face2anime()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lambda_rec >= 0.0 && self.lambda_fm >= 0.0 && self.r1_gamma >= 0.0,
            Config,
            "loss weights must be non-negative: {self:?}"
        );
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::face2anime()
    }
}

/// Scalar loss values of one training iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub adv_g: f64,
    pub adv_d: f64,
    pub fm: f64,
    pub dfm: f64,
    pub rec: f64,
    pub r1: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "iter,adv_g,adv_d,fm,dfm,rec,r1,total_g,total_d";

    pub fn to_csv_row(&self, iter: u64) -> String {
        // `{:?}` prints the shortest representation that round-trips exactly
        format!(
            "{iter},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.adv_g, self.adv_d, self.fm, self.dfm, self.rec, self.r1, self.total_g, self.total_d
        )
    }

    pub fn components(&self) -> [(&'static str, f64); 8] {
        [
            ("adv_g", self.adv_g),
            ("adv_d", self.adv_d),
            ("fm", self.fm),
            ("dfm", self.dfm),
            ("rec", self.rec),
            ("r1", self.r1),
            ("total_g", self.total_g),
            ("total_d", self.total_d),
        ]
    }

    /// Name of the first non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.components()
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(name, _)| name)
    }
}

/// A differentiable objective together with its logged components.
pub struct Objective<T: Scalar> {
    pub total: Tensor<T>,
    pub report: LossReport,
}

fn check_scores<T: Scalar>(scores: &Tensor<T>, what: &str) -> Result<()> {
    ensure!(scores.numel() > 0, Contract, "{what}: empty batch");
    ensure!(scores.all_finite(), InvalidInput, "{what}: non-finite scores");
    Ok(())
}

fn value<T: Scalar>(t: &Tensor<T>) -> f64 {
    t.item().as_f64()
}

/// Discriminator adversarial loss for one domain.
///
/// Hinge: `mean(max(0, 1 - real)) + mean(max(0, 1 + fake))`.
pub fn adv_d_loss<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>, form: AdvForm) -> Result<Tensor<T>> {
    check_scores(real, "real scores")?;
    check_scores(fake, "fake scores")?;
    Ok(match form {
        AdvForm::Hinge => real
            .neg()
            .add_scalar(1.0)
            .relu()
            .mean()
            .add(&fake.add_scalar(1.0).relu().mean()),
        // -(log sigmoid(real) + log(1 - sigmoid(fake)))
        AdvForm::Log => real.neg().softplus().mean().add(&fake.softplus().mean()),
    })
}

/// Generator adversarial loss for one direction. Hinge: `-mean(fake)`.
pub fn adv_g_loss<T: Scalar>(fake: &Tensor<T>, form: AdvForm) -> Result<Tensor<T>> {
    check_scores(fake, "fake scores")?;
    Ok(match form {
        AdvForm::Hinge => fake.mean().neg(),
        // log(1 - sigmoid(fake))
        AdvForm::Log => fake.softplus().mean().neg(),
    })
}

fn mean_abs_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<Tensor<T>> {
    ensure!(
        a.shape() == b.shape(),
        Shape,
        "{what}: shape {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    Ok(a.sub(b).abs().mean())
}

fn summed_l1<T: Scalar>(a: &[Tensor<T>], b: &[Tensor<T>], what: &str) -> Result<Tensor<T>> {
    ensure!(
        a.len() == b.len() && !a.is_empty(),
        Shape,
        "{what}: {} vs {} taps",
        a.len(),
        b.len()
    );
    let mut total: Option<Tensor<T>> = None;
    for (x, y) in a.iter().zip(b) {
        let term = mean_abs_diff(x, y, what)?;
        total = Some(match total {
            Some(t) => t.add(&term),
            None => term,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Sum over trunk scales of the mean absolute difference of pooled features.
pub fn feature_matching<T: Scalar>(real: &FeatureTaps<T>, recon: &FeatureTaps<T>) -> Result<Tensor<T>> {
    summed_l1(&real.shared, &recon.shared, "feature matching")
}

/// Same as [`feature_matching`] on the branch taps of `domain`'s branch.
pub fn domain_feature_matching<T: Scalar>(
    real: &FeatureTaps<T>,
    recon: &FeatureTaps<T>,
    domain: DomainTag,
) -> Result<Tensor<T>> {
    ensure!(
        real.domain == domain && recon.domain == domain,
        Contract,
        "domain-aware matching for {domain} got taps from the {} and {} branches",
        real.domain,
        recon.domain
    );
    summed_l1(&real.branch, &recon.branch, "domain feature matching")
}

/// Mean absolute difference between an image batch and its reconstruction.
pub fn reconstruction_loss<T: Scalar>(x: &ImageBatch<T>, x_rec: &ImageBatch<T>) -> Result<Tensor<T>> {
    mean_abs_diff(x.tensor(), x_rec.tensor(), "reconstruction")
}

/// `(gamma / 2) * mean_n ||d score_n / d h_n||^2` at `real`, for any scoring
/// function that treats samples independently.
///
/// The returned tensor keeps its graph, so it can be differentiated with
/// respect to the scoring function's parameters.
pub fn r1_penalty_with<T: Scalar>(
    real: &Tensor<T>,
    gamma: f64,
    score: impl Fn(&Tensor<T>) -> Tensor<T>,
) -> Result<Tensor<T>> {
    ensure!(real.ndim() >= 1 && real.shape()[0] > 0, Contract, "R1 on empty batch");
    let input = real.detach().requires_grad();
    let scores = score(&input);
    r1_from_scores(&input, &scores, gamma)
}

fn r1_from_scores<T: Scalar>(input: &Tensor<T>, scores: &Tensor<T>, gamma: f64) -> Result<Tensor<T>> {
    let n = input.shape()[0];
    let g = grad(&scores.sum(), &[input], true).remove(0);
    if !g.all_finite() {
        return Err(Error::Numeric("R1: non-finite input gradient".into()));
    }
    let per_sample = g.square().sum_axes_keepdim(&(1..g.ndim()).collect::<Vec<_>>());
    Ok(per_sample.sum().mul_scalar(0.5 * gamma / n as f64))
}

/// R1 penalty of `disc` on real samples of `domain`.
pub fn r1_penalty<T: Scalar>(
    disc: &Discriminator<T>,
    real: &ImageBatch<T>,
    domain: DomainTag,
    gamma: f64,
) -> Result<Tensor<T>> {
    r1_penalty_with(real.tensor(), gamma, |h| disc.score(h, domain))
}

/// Generator objective
/// `adv_g + lambda_rec * rec + lambda_fm * (fm + dfm)`.
///
/// The adversarial term covers both directions: `G(x, y)` judged by the
/// anime branch and `G(y, x)` by the photo branch. Reconstruction and both
/// feature-matching terms use the self-reconstructions `G(h, h)` of both
/// domains. Discriminator parameters appear in the graph but callers take
/// gradients with respect to generator parameters only.
pub fn generator_objective<T: Scalar>(
    gen: &Generator<T>,
    disc: &Discriminator<T>,
    batch: &UnpairedBatch<T>,
    weights: &LossWeights,
    form: AdvForm,
) -> Result<Objective<T>> {
    let (x, y) = (batch.x.tensor(), batch.y.tensor());
    let (code_x, code_y) = (gen.content_forward(x), gen.content_forward(y));
    let (style_x, style_y) = (gen.style_forward(x), gen.style_forward(y));

    let x_to_anime = gen.decode_forward(&code_x, &style_y);
    let y_to_photo = gen.decode_forward(&code_y, &style_x);
    let adv_g = adv_g_loss(&disc.score(&y_to_photo, DomainTag::Photo), form)?
        .add(&adv_g_loss(&disc.score(&x_to_anime, DomainTag::Anime), form)?);

    let mut rec_terms = Vec::with_capacity(2);
    let mut fm_terms = Vec::with_capacity(2);
    let mut dfm_terms = Vec::with_capacity(2);
    for (h, code, style, domain) in [
        (x, &code_x, &style_x, DomainTag::Photo),
        (y, &code_y, &style_y, DomainTag::Anime),
    ] {
        let recon = gen.decode_forward(code, style);
        rec_terms.push(mean_abs_diff(&recon, h, "reconstruction")?);
        let real_taps = no_grad(|| disc.forward(h, domain)).taps;
        let recon_taps = disc.forward(&recon, domain).taps;
        fm_terms.push(feature_matching(&real_taps, &recon_taps)?);
        dfm_terms.push(domain_feature_matching(&real_taps, &recon_taps, domain)?);
    }
    let average = |t: &[Tensor<T>]| t[0].add(&t[1]).mul_scalar(0.5);
    let (rec, fm, dfm) = (average(&rec_terms), average(&fm_terms), average(&dfm_terms));

    let total = adv_g
        .add(&rec.mul_scalar(weights.lambda_rec))
        .add(&fm.add(&dfm).mul_scalar(weights.lambda_fm));
    let report = LossReport {
        adv_g: value(&adv_g),
        fm: value(&fm),
        dfm: value(&dfm),
        rec: value(&rec),
        total_g: value(&total),
        ..LossReport::default()
    };
    Ok(Objective { total, report })
}

/// Discriminator objective: adversarial loss on both branches plus the R1
/// penalty on real samples of both domains. Fakes are generated without
/// gradient tracking, so generator parameters receive no gradient.
pub fn discriminator_objective<T: Scalar>(
    gen: &Generator<T>,
    disc: &Discriminator<T>,
    batch: &UnpairedBatch<T>,
    weights: &LossWeights,
    form: AdvForm,
) -> Result<Objective<T>> {
    let (x, y) = (batch.x.tensor(), batch.y.tensor());
    let (y_to_photo, x_to_anime) = no_grad(|| {
        let (code_x, code_y) = (gen.content_forward(x), gen.content_forward(y));
        let (style_x, style_y) = (gen.style_forward(x), gen.style_forward(y));
        (
            gen.decode_forward(&code_y, &style_x),
            gen.decode_forward(&code_x, &style_y),
        )
    });

    let mut adv_terms = Vec::with_capacity(2);
    let mut r1_terms = Vec::with_capacity(2);
    for (real, fake, domain) in [
        (x, &y_to_photo, DomainTag::Photo),
        (y, &x_to_anime, DomainTag::Anime),
    ] {
        let real_in = if weights.r1_gamma > 0.0 {
            real.detach().requires_grad()
        } else {
            real.detach()
        };
        let real_scores = disc.score(&real_in, domain);
        let fake_scores = disc.score(fake, domain);
        adv_terms.push(adv_d_loss(&real_scores, &fake_scores, form)?);
        if weights.r1_gamma > 0.0 {
            r1_terms.push(r1_from_scores(&real_in, &real_scores, weights.r1_gamma)?);
        }
    }
    let adv_d = adv_terms[0].add(&adv_terms[1]);
    let r1 = match r1_terms.as_slice() {
        [a, b] => a.add(b),
        _ => Tensor::scalar(T::zero()),
    };
    let total = adv_d.add(&r1);
    let report = LossReport {
        adv_d: value(&adv_d),
        r1: value(&r1),
        total_d: value(&total),
        ..LossReport::default()
    };
    Ok(Objective { total, report })
}
