//! Classification metrics and the dataset evaluation driver.

use serde::Serialize;

use crate::complexity::count_complexity;
use crate::data::{resample, stack_batch, DataError, EmotionLabel, SkeletonSequence, NUM_CLASSES};
use crate::model::{predict_classes, GaitModel, ModelConfig};
use crate::tensor::{Graph, ParamStore, Scalar, TensorError};

#[derive(Debug, Clone, Serialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ComplexityTotals {
    pub params: usize,
    pub flops: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[truth][prediction]` counts.
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
    /// Filled when the report comes from a model evaluation.
    pub complexity: Option<ComplexityTotals>,
    /// Classes absent from the evaluated set; their F1 counts as zero.
    pub warnings: Vec<String>,
}

pub fn confusion_matrix(
    predictions: &[usize],
    labels: &[EmotionLabel],
) -> Result<[[usize; NUM_CLASSES]; NUM_CLASSES], DataError> {
    if predictions.len() != labels.len() {
        return Err(DataError::Invalid(format!(
            "{} predictions against {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for (&pred, &truth) in predictions.iter().zip(labels) {
        if pred >= NUM_CLASSES {
            return Err(DataError::Invalid(format!("prediction {pred} out of range")));
        }
        confusion[truth.index()][pred] += 1;
    }
    Ok(confusion)
}

/// Accuracy, per-class precision/recall/F1, and macro F1. A class with
/// no support and no predictions contributes an F1 of zero; the macro
/// average always divides by the full class count.
pub fn metrics_from_confusion(confusion: [[usize; NUM_CLASSES]; NUM_CLASSES]) -> EvalReport {
    let samples: usize = confusion.iter().flatten().sum();
    let correct: usize = (0..NUM_CLASSES).map(|k| confusion[k][k]).sum();
    let mut per_class = Vec::with_capacity(NUM_CLASSES);
    for k in 0..NUM_CLASSES {
        let tp = confusion[k][k];
        let support: usize = confusion[k].iter().sum();
        let predicted: usize = (0..NUM_CLASSES).map(|t| confusion[t][k]).sum();
        let precision = if predicted > 0 { tp as f64 / predicted as f64 } else { 0.0 };
        let recall = if support > 0 { tp as f64 / support as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassMetrics {
            label: EmotionLabel::from_index(k).unwrap().as_str().to_string(),
            precision,
            recall,
            f1,
            support,
        });
    }
    let warnings = per_class
        .iter()
        .filter(|c| c.support == 0)
        .map(|c| format!("class {} absent from the evaluated set", c.label))
        .collect();
    EvalReport {
        samples,
        accuracy: if samples > 0 { correct as f64 / samples as f64 } else { 0.0 },
        macro_f1: per_class.iter().map(|c| c.f1).sum::<f64>() / NUM_CLASSES as f64,
        per_class,
        confusion,
        complexity: None,
        warnings,
    }
}

impl EvalReport {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "samples {}  accuracy {:.4}  macro-f1 {:.4}\n",
            self.samples, self.accuracy, self.macro_f1
        ));
        if let Some(c) = &self.complexity {
            out.push_str(&format!(
                "model: {:.3}M params, {:.4}G flops\n",
                c.params as f64 / 1e6,
                c.flops as f64 / 1e9
            ));
        }
        for w in &self.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
        out.push_str(&format!(
            "{:<8}  {:>9}  {:>9}  {:>9}  {:>7}\n",
            "class", "precision", "recall", "f1", "support"
        ));
        for c in &self.per_class {
            out.push_str(&format!(
                "{:<8}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}\n",
                c.label, c.precision, c.recall, c.f1, c.support
            ));
        }
        out.push_str("confusion (rows truth, columns prediction):\n");
        out.push_str(&format!("{:<8}", ""));
        for k in 0..NUM_CLASSES {
            out.push_str(&format!("  {:>7}", EmotionLabel::from_index(k).unwrap().as_str()));
        }
        out.push('\n');
        for (t, row) in self.confusion.iter().enumerate() {
            out.push_str(&format!("{:<8}", EmotionLabel::from_index(t).unwrap().as_str()));
            for count in row {
                out.push_str(&format!("  {count:>7}"));
            }
            out.push('\n');
        }
        out
    }

    /// Confusion matrix as CSV, rows truth, columns prediction.
    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("truth\\pred");
        for k in 0..NUM_CLASSES {
            out.push(',');
            out.push_str(EmotionLabel::from_index(k).unwrap().as_str());
        }
        out.push('\n');
        for (t, row) in self.confusion.iter().enumerate() {
            out.push_str(EmotionLabel::from_index(t).unwrap().as_str());
            for count in row {
                out.push_str(&format!(",{count}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Run the network over a dataset in inference batches and score the
/// averaged two-stream predictions.
pub fn evaluate<E: Scalar>(
    model: &GaitModel<E>,
    store: &ParamStore<E>,
    config: &ModelConfig,
    sequences: &[SkeletonSequence],
    batch_size: usize,
) -> Result<EvalReport, TensorError> {
    if batch_size == 0 {
        return Err(TensorError::Invalid("batch_size must be positive".into()));
    }
    let mut predictions = Vec::with_capacity(sequences.len());
    let mut labels = Vec::with_capacity(sequences.len());
    for chunk in sequences.chunks(batch_size) {
        let resampled: Vec<_> = chunk
            .iter()
            .map(|s| resample(&s.frames, config.frames))
            .collect::<Result<_, _>>()
            .map_err(|e| TensorError::Invalid(e.to_string()))?;
        let coords = stack_batch::<E>(&resampled).map_err(|e| TensorError::Invalid(e.to_string()))?;
        let (posture, motion) =
            crate::model::stream_inputs(&coords).map_err(|e| TensorError::Invalid(e.to_string()))?;
        let mut g = Graph::new();
        let p = g.constant(posture);
        let m = g.constant(motion);
        let out = model.forward(&mut g, store, p, m)?;
        let probs_p = g.to_tensor(out.probs_p);
        let probs_m = g.to_tensor(out.probs_m);
        predictions.extend(predict_classes(&probs_p, &probs_m));
        labels.extend(chunk.iter().map(|s| s.label));
    }
    let confusion =
        confusion_matrix(&predictions, &labels).map_err(|e| TensorError::Invalid(e.to_string()))?;
    let mut report = metrics_from_confusion(confusion);
    let budget = count_complexity(config)?;
    report.complexity = Some(ComplexityTotals { params: budget.params, flops: budget.flops });
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GeneratorConfig;
    use crate::rng::stream_rng;

    fn labels(indices: &[usize]) -> Vec<EmotionLabel> {
        indices.iter().map(|&i| EmotionLabel::from_index(i).unwrap()).collect()
    }

    #[test]
    fn always_first_class_on_balanced_data_scores_a_tenth_macro_f1() {
        let truth = labels(&[0, 1, 2, 3, 0, 1, 2, 3]);
        let predictions = vec![0; truth.len()];
        let report = metrics_from_confusion(confusion_matrix(&predictions, &truth).unwrap());
        assert!((report.accuracy - 0.25).abs() < 1e-12);
        assert!((report.macro_f1 - 0.1).abs() < 1e-12);
        assert!((report.per_class[0].f1 - 0.4).abs() < 1e-12);
        assert_eq!(report.per_class[1].f1, 0.0);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let truth = labels(&[0, 1, 2, 3, 2, 1]);
        let predictions = vec![0, 1, 2, 3, 2, 1];
        let report = metrics_from_confusion(confusion_matrix(&predictions, &truth).unwrap());
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.macro_f1, 1.0);
        for k in 0..NUM_CLASSES {
            for t in 0..NUM_CLASSES {
                assert_eq!(report.confusion[k][t], if k == t { report.per_class[k].support } else { 0 });
            }
        }
    }

    #[test]
    fn hand_computed_mixed_case() {
        let truth = labels(&[0, 1, 2, 2]);
        let predictions = vec![0, 1, 1, 2];
        let report = metrics_from_confusion(confusion_matrix(&predictions, &truth).unwrap());
        assert!((report.accuracy - 0.75).abs() < 1e-12);
        assert!((report.per_class[1].precision - 0.5).abs() < 1e-12);
        assert!((report.per_class[1].recall - 1.0).abs() < 1e-12);
        assert!((report.per_class[2].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((report.macro_f1 - 7.0 / 12.0).abs() < 1e-12);
        assert_eq!(report.per_class[3].support, 0);
    }

    #[test]
    fn length_and_range_mismatches_are_rejected() {
        assert!(confusion_matrix(&[0, 1], &labels(&[0])).is_err());
        assert!(confusion_matrix(&[4], &labels(&[0])).is_err());
    }

    #[test]
    fn csv_and_text_have_one_row_per_class() {
        let truth = labels(&[0, 1, 2, 3]);
        let report = metrics_from_confusion(confusion_matrix(&[0, 0, 0, 0], &truth).unwrap());
        let csv = report.confusion_csv();
        assert_eq!(csv.lines().count(), NUM_CLASSES + 1);
        assert!(csv.lines().nth(1).unwrap().starts_with("happy,1,0,0,0"));
        let text = report.render_text();
        assert!(text.contains("macro-f1 0.1000"));
    }

    #[test]
    fn untrained_model_evaluates_every_sequence_once() {
        let config = ModelConfig {
            frames: 8,
            heads: 2,
            ..ModelConfig::default().with_block_count(3)
        };
        let mut store = ParamStore::<f32>::new();
        let mut rng = stream_rng(5, "eval-test", 0);
        let model = GaitModel::register(&mut store, config.clone(), &mut rng).unwrap();
        let data = crate::data::generate_dataset(&GeneratorConfig::default(), [2, 2, 2, 2], 11);
        let report = evaluate(&model, &store, &config, &data, 3).unwrap();
        assert_eq!(report.samples, 8);
        let row_sum: usize = report.confusion.iter().flatten().sum();
        assert_eq!(row_sum, 8);
        for (k, c) in report.per_class.iter().enumerate() {
            assert_eq!(c.support, 2, "class {k}");
        }
        assert!((0.0..=1.0).contains(&report.accuracy));
    }
}
