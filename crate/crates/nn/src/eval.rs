//! Evaluation of trained encoders and decoders.

use serde::{Deserialize, Serialize};
use volrep_core::abnormality::Findings;
use volrep_core::metrics::{exact_match_accuracy, multilabel_pr_auc, per_bit_accuracy};
use volrep_core::report::{parse_report, Report, TemplateLibrary, Vocabulary};
use volrep_core::Execution;

use crate::decoder::{Decoder, GenerationResult, Memory};
use crate::encoder::{Encoder, EncoderInput, Prediction};
use crate::tensor::argmax;
use crate::train::DecoderSample;
use crate::{Error, Result};

pub fn predict_all(encoder: &Encoder, inputs: &[EncoderInput], exec: Execution) -> Result<Vec<Prediction>> {
    exec.map(inputs, |i| i.predict(encoder)).into_iter().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderMetrics {
    /// Fraction of samples with every label bit right at threshold 0.5.
    pub accuracy: f64,
    pub per_bit_accuracy: f64,
    /// Micro-averaged PR-AUC over all label bits; absent without positives.
    pub pr_auc: Option<f64>,
    pub n: usize,
}

pub fn encoder_metrics(predictions: &[Prediction], labels: &[Vec<u8>]) -> Result<EncoderMetrics> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::invalid("need one label vector per prediction"));
    }
    let probs: Vec<Vec<f64>> = predictions.iter().map(|p| p.probabilities.clone()).collect();
    Ok(EncoderMetrics {
        accuracy: exact_match_accuracy(&probs, labels, 0.5)?,
        per_bit_accuracy: per_bit_accuracy(&probs, labels, 0.5)?,
        pr_auc: match multilabel_pr_auc(&probs, labels) {
            Ok(c) => Some(c.area),
            Err(volrep_core::Error::Undefined(_)) => None,
            Err(e) => return Err(e.into()),
        },
        n: predictions.len(),
    })
}

/// Micro-averaged teacher-forced next-token accuracy over all target
/// positions (EOS included) of all samples.
pub fn next_word_accuracy(decoder: &Decoder, samples: &[DecoderSample], exec: Execution) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("next-word accuracy of an empty set"));
    }
    let counts = exec.map(samples, |s| -> Result<(usize, usize)> {
        let dists = decoder.teacher_forced(&s.reference, &s.memory)?;
        let hits = dists.iter().zip(&s.reference[1..]).filter(|(d, &t)| argmax(d) == t as usize).count();
        Ok((hits, dists.len()))
    });
    let (mut hits, mut total) = (0, 0);
    for c in counts {
        let (h, t) = c?;
        hits += h;
        total += t;
    }
    Ok(hits as f64 / total as f64)
}

pub fn generate_all(
    decoder: &Decoder,
    memories: &[Memory],
    max_len: usize,
    exec: Execution,
) -> Result<Vec<GenerationResult>> {
    exec.map(memories, |m| decoder.generate(m, max_len)).into_iter().collect()
}

pub fn generated_report(vocab: &Vocabulary, g: &GenerationResult) -> Result<Report> {
    Ok(Report::from_text(&vocab.decode(&g.ids)?))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FactualAccuracy {
    /// Reports whose parsed claims equal the truth exactly, with no
    /// unparseable sentence.
    pub overall: f64,
    pub mirror: Option<f64>,
    pub rotation: Option<f64>,
    pub occlusion: Option<f64>,
    /// Reports in which every sentence matched a template.
    pub parseable: f64,
    pub n: usize,
}

/// Parses each generated report and compares its claims with the truth.
pub fn factual_accuracy(reports: &[Report], truths: &[Findings], lib: &TemplateLibrary) -> Result<FactualAccuracy> {
    if reports.is_empty() || reports.len() != truths.len() {
        return Err(Error::invalid("need one truth per generated report"));
    }
    let mut correct = 0;
    let mut parseable = 0;
    let mut parts = [(0usize, 0usize); 3];
    for (r, t) in reports.iter().zip(truths) {
        let p = parse_report(r, lib);
        let clean = p.unparseable() == 0 && !r.sentences.is_empty();
        parseable += usize::from(clean);
        correct += usize::from(clean && p.findings == *t);
        let checks = [
            t.mirrored.map(|m| p.findings.mirrored == Some(m)),
            t.rotation.map(|m| p.findings.rotation == Some(m)),
            t.occluded_lobe.map(|m| p.findings.occluded_lobe == Some(m)),
        ];
        for (slot, c) in parts.iter_mut().zip(checks) {
            if let Some(ok) = c {
                slot.0 += usize::from(ok);
                slot.1 += 1;
            }
        }
    }
    let rate = |(hit, n): (usize, usize)| (n > 0).then(|| hit as f64 / n as f64);
    let n = reports.len();
    Ok(FactualAccuracy {
        overall: correct as f64 / n as f64,
        mirror: rate(parts[0]),
        rotation: rate(parts[1]),
        occlusion: rate(parts[2]),
        parseable: parseable as f64 / n as f64,
        n,
    })
}
