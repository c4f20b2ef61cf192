//! Explanation artifacts: per-instance case studies, prototype tables, and
//! span agreement against planted phrases.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Instance, SpanAnnotation};
use crate::error::{Error, Result};
use crate::model::{EncodedText, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: usize,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeExplanation {
    pub prototype_id: usize,
    pub aligned_sentence: String,
    /// Verbatim input substring covered by the span; empty when no part
    /// clears the threshold.
    pub span_text: String,
    /// 1-based inclusive part range.
    pub span_part_range: Option<(usize, usize)>,
    /// RMS-normalized similarity.
    pub similarity_score: f64,
    /// Head weight toward the predicted class, relative to the others.
    pub class_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub prediction: Prediction,
    /// Sorted by descending similarity.
    pub prototypes: Vec<PrototypeExplanation>,
}

/// Byte range of the input covered by a 1-based inclusive part range.
pub fn span_byte_range(encoded: &EncodedText, range: (usize, usize)) -> Option<(usize, usize)> {
    if encoded.tokens.is_empty() {
        return None;
    }
    let first = encoded.parts.parts.get(range.0.checked_sub(1)?)?;
    let last = encoded.parts.parts.get(range.1.checked_sub(1)?)?;
    Some((
        encoded.tokens[first.start_token].start,
        encoded.tokens[last.end_token].end,
    ))
}

fn class_weight(model: &Model, k: usize, predicted: usize) -> f64 {
    let bank = model.bank();
    if bank.num_classes() == 2 {
        bank.class_weight_of(k)
    } else {
        bank.class_weight_toward(k, predicted)
    }
}

/// Explain one prediction. `top` limits the number of prototypes listed.
pub fn explain_instance(model: &Model, text: &str, top: Option<usize>) -> Result<ExplanationReport> {
    let log = model.alignment.as_ref().ok_or(Error::NotAligned)?;
    let encoded = model.encode(text)?;
    let pass = model.forward_encoded(&encoded)?;

    let mut prototypes: Vec<PrototypeExplanation> = pass
        .prototypes
        .iter()
        .enumerate()
        .map(|(k, trace)| {
            let range = trace.mask.discrete;
            let span_text = range
                .and_then(|r| span_byte_range(&encoded, r))
                .map(|(a, b)| text[a..b].to_string())
                .unwrap_or_default();
            PrototypeExplanation {
                prototype_id: k,
                aligned_sentence: log.sentence_for(k).unwrap_or_default().to_string(),
                span_text,
                span_part_range: range,
                similarity_score: pass.similarity.normalized[k],
                class_weight: class_weight(model, k, pass.prediction),
            }
        })
        .collect();
    prototypes.sort_by(|a, b| {
        b.similarity_score
            .total_cmp(&a.similarity_score)
            .then(a.prototype_id.cmp(&b.prototype_id))
    });
    if let Some(n) = top {
        prototypes.truncate(n);
    }
    Ok(ExplanationReport {
        prediction: Prediction {
            class: pass.prediction,
            probability: pass.probabilities[pass.prediction],
        },
        prototypes,
    })
}

/// Case-study rendering with each span wrapped in `[[ ]]`.
pub fn render_text(report: &ExplanationReport, text: &str, model: &Model) -> Result<String> {
    let encoded = model.encode(text)?;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "prediction: class {} (p = {:.4})",
        report.prediction.class, report.prediction.probability
    );
    for p in &report.prototypes {
        let _ = writeln!(
            out,
            "\nprototype {}  similarity {:+.4}  weight {:+.4}",
            p.prototype_id, p.similarity_score, p.class_weight
        );
        let _ = writeln!(out, "  aligned: {}", p.aligned_sentence);
        match p.span_part_range.and_then(|r| span_byte_range(&encoded, r)) {
            Some((a, b)) => {
                let _ = writeln!(out, "  span:    {}[[{}]]{}", &text[..a], &text[a..b], &text[b..]);
            }
            None => {
                let _ = writeln!(out, "  span:    (no span above threshold)");
            }
        }
    }
    Ok(out)
}

pub fn render_json(report: &ExplanationReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeRow {
    pub prototype_id: usize,
    pub sentence: String,
    /// Remaining chosen candidates, most similar first.
    pub neighbours: Vec<String>,
    pub class_weight: f64,
}

/// One row per prototype: its aligned sentence and head weight.
pub fn prototype_table(model: &Model) -> Result<Vec<PrototypeRow>> {
    let log = model.alignment.as_ref().ok_or(Error::NotAligned)?;
    let bank = model.bank();
    Ok((0..bank.num_prototypes())
        .map(|k| {
            let sentences = log
                .records
                .iter()
                .find(|r| r.prototype_id == k)
                .map(|r| r.sentences.clone())
                .unwrap_or_default();
            PrototypeRow {
                prototype_id: k,
                sentence: sentences.first().cloned().unwrap_or_default(),
                neighbours: sentences.into_iter().skip(1).collect(),
                class_weight: if bank.num_classes() == 2 {
                    bank.class_weight_of(k)
                } else {
                    bank.class_weight_toward(k, 0)
                },
            }
        })
        .collect())
}

pub fn render_table(rows: &[PrototypeRow]) -> String {
    let mut out = String::from("id\tweight\tsentence\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{:+.4}\t{}", r.prototype_id, r.class_weight, r.sentence);
    }
    out
}

/// How often the top-similarity prototype's span lands on the planted phrase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SpanAgreement {
    pub correct: usize,
    /// Spans sharing at least one part with the phrase.
    pub overlapping: usize,
    /// Spans lying entirely inside the parts that touch the phrase.
    pub contained: usize,
    pub mean_width: f64,
    pub mean_parts: f64,
}

impl SpanAgreement {
    pub fn overlap_rate(&self) -> f64 {
        self.overlapping as f64 / self.correct.max(1) as f64
    }

    pub fn contained_rate(&self) -> f64 {
        self.contained as f64 / self.correct.max(1) as f64
    }
}

/// Span agreement over correctly classified instances; `annotations[i]`
/// describes `data[i]`.
pub fn span_agreement(model: &Model, data: &[Instance], annotations: &[&SpanAnnotation]) -> Result<SpanAgreement> {
    if data.len() != annotations.len() {
        return Err(Error::InvalidParameter(
            "span agreement needs one annotation per instance".into(),
        ));
    }
    let mut agg = SpanAgreement::default();
    let (mut width, mut parts) = (0usize, 0usize);
    for (inst, ann) in data.iter().zip(annotations) {
        let encoded = model.encode(&inst.text)?;
        let pass = model.forward_encoded(&encoded)?;
        if pass.prediction != inst.label {
            continue;
        }
        agg.correct += 1;
        parts += encoded.parts.len();
        let top = crate::linalg::argmax(&pass.similarity.normalized);
        let Some((a, b)) = pass.prototypes[top].mask.discrete else {
            continue;
        };
        width += b - a + 1;
        let (pa, pb) = ann.overlapping_parts(encoded.tokens.len(), model.arch.n_gram);
        let (a0, b0) = (a - 1, b - 1);
        if a0 <= pb && pa <= b0 {
            agg.overlapping += 1;
        }
        if pa <= a0 && b0 <= pb {
            agg.contained += 1;
        }
    }
    if agg.correct > 0 {
        agg.mean_width = width as f64 / agg.correct as f64;
        agg.mean_parts = parts as f64 / agg.correct as f64;
    }
    Ok(agg)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::alignment::{AlignmentLog, AlignmentRecord};
    use crate::model::Architecture;

    fn aligned_model() -> Model {
        let arch = Architecture {
            num_prototypes: 3,
            num_classes: 2,
            embed_dim: 8,
            hash_dim: 64,
            n_gram: 2,
            t_max: 16,
            mlp_hidden: 4,
            components: 2,
            span_smoothness: 2.0,
            union_mask: false,
        };
        let mut model = Model::new(arch, &Default::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        model.alignment = Some(AlignmentLog {
            epoch: 1,
            records: (0..3)
                .map(|k| AlignmentRecord {
                    prototype_id: k,
                    sentences: vec![format!("sentence {k}"), "other".into()],
                    distance: 0.0,
                    displacement: 0.0,
                })
                .collect(),
        });
        model
    }

    #[test]
    fn unaligned_model_is_rejected() {
        let mut model = aligned_model();
        model.alignment = None;
        assert!(matches!(explain_instance(&model, "a b", None), Err(Error::NotAligned)));
        assert!(matches!(prototype_table(&model), Err(Error::NotAligned)));
    }

    #[test]
    fn report_is_sorted_and_spans_are_verbatim() {
        let model = aligned_model();
        let text = "The  film, frankly, was GREAT fun!";
        let report = explain_instance(&model, text, None).unwrap();
        assert_eq!(report.prototypes.len(), 3);
        for w in report.prototypes.windows(2) {
            assert!(w[0].similarity_score >= w[1].similarity_score);
        }
        for p in &report.prototypes {
            assert!(text.contains(&p.span_text));
            assert_eq!(p.aligned_sentence, format!("sentence {}", p.prototype_id));
            if p.span_part_range.is_none() {
                assert!(p.span_text.is_empty());
            }
        }
        let top1 = explain_instance(&model, text, Some(1)).unwrap();
        assert_eq!(top1.prototypes.len(), 1);
        assert_eq!(top1.prototypes[0], report.prototypes[0]);
    }

    #[test]
    fn byte_ranges_follow_token_offsets() {
        let model = aligned_model();
        let text = "one, two three";
        let encoded = model.encode(text).unwrap();
        // Parts: "one ,", ", two", "two three".
        assert_eq!(span_byte_range(&encoded, (1, 1)), Some((0, 4)));
        assert_eq!(span_byte_range(&encoded, (2, 3)), Some((3, 14)));
        assert_eq!(span_byte_range(&encoded, (4, 4)), None);
    }

    #[test]
    fn renderers() {
        let model = aligned_model();
        let text = "alpha beta gamma delta";
        let report = explain_instance(&model, text, None).unwrap();
        let rendered = render_text(&report, text, &model).unwrap();
        assert!(rendered.starts_with("prediction: class"));
        assert_eq!(rendered.matches("prototype ").count(), 3);
        let json: serde_json::Value = serde_json::from_str(&render_json(&report).unwrap()).unwrap();
        assert!(json["prediction"]["probability"].is_f64());
        assert_eq!(json["prototypes"].as_array().unwrap().len(), 3);

        let table = render_table(&prototype_table(&model).unwrap());
        assert_eq!(table.lines().count(), 4);
    }
}
