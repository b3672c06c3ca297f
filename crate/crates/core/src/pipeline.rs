//! Two-stage inference and test-set evaluation.

use std::fmt::Write as _;

use crate::amg::{AmgNetwork, AttentionBundle};
use crate::dme::{variant_inputs, DmeNetwork, PipelineVariant, VariantKind};
use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::metrics::{prepare_record, EvalRecord, MetricsReport};
use crate::synth::SceneSample;
use crate::tensor::Tensor;

/// Thresholds swept for the binarized-attention variant.
pub const SWEEP_THRESHOLDS: [f64; 3] = [0.2, 0.1, 0.0];

#[derive(Clone, Debug)]
pub struct Prediction {
    pub density: DensityMap<f32>,
    /// Present whenever an AMG was supplied.
    pub attention: Option<AttentionBundle<f32>>,
}

/// Runs the pipeline on one `[1, 1, H, W]` image. The AMG runs whenever it is
/// supplied (so its label and attention can be reported), but only attention
/// variants feed its output to the estimator.
pub fn predict(
    dme: &DmeNetwork<f32>,
    amg: Option<&AmgNetwork<f32>>,
    variant: &PipelineVariant,
    image: &Tensor<f32>,
) -> Result<Prediction> {
    if variant.kind.uses_attention() && amg.is_none() {
        return Err(Error::invalid(format!(
            "variant {} requires an AMG network",
            variant.kind
        )));
    }
    let attention = amg.map(|a| a.forward(image)).transpose()?;
    let (input, feat) = variant_inputs(variant, image, attention.as_ref().map(|b| &b.attention))?;
    Ok(Prediction {
        density: dme.predict(&input, feat.as_ref())?,
        attention,
    })
}

pub struct Evaluation {
    pub report: MetricsReport,
    pub records: Vec<EvalRecord>,
    pub predictions: Vec<Prediction>,
}

/// Scores `variant` over `samples`.
pub fn evaluate(
    dme: &DmeNetwork<f32>,
    amg: Option<&AmgNetwork<f32>>,
    variant: &PipelineVariant,
    samples: &[SceneSample],
) -> Result<Evaluation> {
    let mut records = Vec::with_capacity(samples.len());
    let mut predictions = Vec::with_capacity(samples.len());
    for s in samples {
        let p = predict(dme, amg, variant, &s.image)?;
        records.push(prepare_record(&p.density, &s.gt_density)?);
        predictions.push(p);
    }
    Ok(Evaluation {
        report: MetricsReport::from_records(&records)?,
        records,
        predictions,
    })
}

/// Scores the ground truth against itself (sanity baseline).
pub fn evaluate_oracle(samples: &[SceneSample]) -> Result<MetricsReport> {
    let records = samples
        .iter()
        .map(|s| EvalRecord::oracle(&s.gt_density))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_records(&records)
}

#[derive(Clone, Debug)]
pub struct VariantRow {
    pub variant: PipelineVariant,
    pub report: MetricsReport,
}

/// Evaluates one binarized-attention estimator at each threshold.
pub fn threshold_sweep(
    dme: &DmeNetwork<f32>,
    amg: &AmgNetwork<f32>,
    samples: &[SceneSample],
    thresholds: &[f64],
) -> Result<Vec<VariantRow>> {
    thresholds
        .iter()
        .map(|&t| {
            let variant = PipelineVariant::new(VariantKind::AmgBAttnDme, t)?;
            Ok(VariantRow {
                variant,
                report: evaluate(dme, Some(amg), &variant, samples)?.report,
            })
        })
        .collect()
}

/// Fixed-width table, one row per variant.
pub fn format_table(rows: &[VariantRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<14} {:>9} {:>10} {:>10} {:>9} {:>8}",
        "variant", "threshold", "MAE", "MSE", "PSNR", "SSIM"
    );
    for r in rows {
        let t = if r.variant.kind == VariantKind::AmgBAttnDme {
            format!("{:.1}", r.variant.threshold)
        } else {
            "-".to_string()
        };
        let _ = writeln!(
            s,
            "{:<14} {:>9} {:>10.4} {:>10.4} {:>9.3} {:>8.4}",
            r.variant.kind.as_str(),
            t,
            r.report.mae,
            r.report.mse,
            r.report.mean_psnr,
            r.report.mean_ssim
        );
    }
    s
}
