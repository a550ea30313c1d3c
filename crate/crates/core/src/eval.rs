//! Evaluation over held-out conditions for every modality subset.

use serde::{Deserialize, Serialize};

use crate::denoiser::NoisePredictor;
use crate::diffusion::VarianceSchedule;
use crate::error::{Error, Result};
use crate::metrics::{alignment_report, diversity_proxy, mmd_quality, AlignmentReport, MetricsReport};
use crate::modulation::ModalityBundle;
use crate::sampler::{sample, Conditioning, SampleConfig};
use crate::scalar::Scalar;
use crate::synth::{palette, stack_images, PairedExample};
use crate::tensor::Tensor;
use crate::unet::UNet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConditionSubset {
    #[serde(rename = "none")]
    Unconditional,
    #[serde(rename = "seg")]
    Seg,
    #[serde(rename = "sketch")]
    Sketch,
    #[serde(rename = "seg+sketch")]
    Both,
}

impl ConditionSubset {
    pub const ALL: [ConditionSubset; 4] =
        [ConditionSubset::Unconditional, ConditionSubset::Seg, ConditionSubset::Sketch, ConditionSubset::Both];

    pub fn name(&self) -> &'static str {
        match self {
            ConditionSubset::Unconditional => "none",
            ConditionSubset::Seg => "seg",
            ConditionSubset::Sketch => "sketch",
            ConditionSubset::Both => "seg+sketch",
        }
    }

    pub fn uses_seg(&self) -> bool {
        matches!(self, ConditionSubset::Seg | ConditionSubset::Both)
    }

    pub fn uses_sketch(&self) -> bool {
        matches!(self, ConditionSubset::Sketch | ConditionSubset::Both)
    }

    pub fn apply(&self, bundle: &ModalityBundle) -> ModalityBundle {
        bundle.select(self.uses_seg(), self.uses_sketch())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub condition: ConditionSubset,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn row(&self, c: ConditionSubset) -> Option<&MetricsReport> {
        self.rows.iter().find(|r| r.condition == c).map(|r| &r.metrics)
    }
}

/// Samples and scores for one condition subset.
#[derive(Debug, Clone)]
pub struct SubsetResult<T: Scalar> {
    pub condition: ConditionSubset,
    /// `[conditions * per_condition, 3, H, W]`, grouped by condition.
    pub samples: Tensor<T>,
    pub alignment: AlignmentReport,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub sample: SampleConfig,
    pub per_condition: usize,
    pub batch: usize,
}

/// Draw `per_condition` samples for each held-out condition under `subset`.
/// Sample `c * per_condition + j` uses the same seed in every subset.
pub fn sample_subset<T: Scalar, B: NoisePredictor<T>>(
    base: &B,
    mcm: Option<&UNet<T>>,
    conditions: &[PairedExample],
    subset: ConditionSubset,
    schedule: &VarianceSchedule,
    opts: &EvalOptions,
) -> Result<Tensor<T>> {
    if conditions.is_empty() || opts.per_condition == 0 || opts.batch == 0 {
        return Err(Error::InvalidArgument("need conditions, samples per condition and a batch size".into()));
    }
    if subset != ConditionSubset::Unconditional && mcm.is_none() {
        return Err(Error::InvalidArgument(format!("subset {} needs a conditioning module", subset.name())));
    }
    let image_shape = conditions[0].image.shape().to_vec();
    let bundles: Vec<ModalityBundle> = conditions
        .iter()
        .flat_map(|c| std::iter::repeat_n(subset.apply(&c.bundle()), opts.per_condition))
        .collect();
    let total = bundles.len();
    let mut parts = Vec::new();
    let mut start = 0;
    while start < total {
        let end = (start + opts.batch).min(total);
        let cond = mcm.map(|m| Conditioning { mcm: m, bundles: &bundles[start..end] });
        parts.push(sample(base, cond, &image_shape, start as u64, end - start, schedule, &opts.sample)?);
        start = end;
    }
    Tensor::stack0(&parts)
}

pub fn rows<T: Scalar>(batch: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let inner = &batch.shape()[1..];
    (0..batch.shape()[0]).map(|i| batch.narrow0(i, i + 1)?.reshape(inner)).collect()
}

/// Score samples grouped by condition.
pub fn score_subset<T: Scalar>(
    condition: ConditionSubset,
    samples: Tensor<T>,
    conditions: &[PairedExample],
    per_condition: usize,
) -> Result<SubsetResult<T>> {
    let k = conditions[0].num_classes;
    let pal = palette(k);
    let imgs = rows(&samples)?;
    if imgs.len() != conditions.len() * per_condition {
        return Err(Error::InvalidArgument(format!("{} samples for {} conditions", imgs.len(), conditions.len())));
    }
    let seg: Vec<&[u8]> = conditions.iter().flat_map(|c| std::iter::repeat_n(c.seg.as_slice(), per_condition)).collect();
    let sk: Vec<&[f32]> = conditions.iter().flat_map(|c| std::iter::repeat_n(c.sketch.as_slice(), per_condition)).collect();
    let alignment = alignment_report(&imgs, &seg, &sk, &pal)?;
    let diversity = if per_condition >= 2 {
        let mut acc = 0.0;
        for group in imgs.chunks(per_condition) {
            acc += diversity_proxy(group)?;
        }
        Some(acc / conditions.len() as f64)
    } else {
        None
    };
    let real: Tensor<T> = stack_images(conditions)?;
    let mmd = if imgs.len() >= 2 && conditions.len() >= 2 { Some(mmd_quality(&samples, &real, None)?) } else { None };
    let metrics = MetricsReport {
        miou: Some(alignment.miou),
        accuracy: Some(alignment.accuracy),
        sketch_distance: Some(alignment.sketch_distance),
        diversity,
        mmd,
        n: imgs.len(),
    };
    Ok(SubsetResult { condition, samples, alignment, metrics })
}

/// Sample and score every requested subset.
pub fn evaluate<T: Scalar, B: NoisePredictor<T>>(
    base: &B,
    mcm: Option<&UNet<T>>,
    conditions: &[PairedExample],
    subsets: &[ConditionSubset],
    schedule: &VarianceSchedule,
    opts: &EvalOptions,
) -> Result<Vec<SubsetResult<T>>> {
    subsets
        .iter()
        .map(|&s| {
            let samples = sample_subset(base, mcm, conditions, s, schedule, opts)?;
            log::info!("sampled {} images for condition {}", samples.shape()[0], s.name());
            score_subset(s, samples, conditions, opts.per_condition)
        })
        .collect()
}

pub fn report<T: Scalar>(results: &[SubsetResult<T>]) -> EvalReport {
    EvalReport { rows: results.iter().map(|r| EvalRow { condition: r.condition, metrics: r.metrics.clone() }).collect() }
}
