//! Prompt-ensembled zero-shot classification.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Serialize;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::text::{Vocabulary, BOS};

/// Class label → prompt texts.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PromptSet {
    pub classes: BTreeMap<String, Vec<String>>,
}

impl PromptSet {
    pub fn new(classes: BTreeMap<String, Vec<String>>) -> Result<Self> {
        let set = Self { classes };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::InvalidArgument("empty prompt set".into()));
        }
        for (c, prompts) in &self.classes {
            if prompts.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "class `{c}` has no prompts"
                )));
            }
            let distinct: BTreeSet<&String> = prompts.iter().collect();
            if distinct.len() != prompts.len() {
                return Err(Error::InvalidArgument(format!(
                    "class `{c}` repeats a prompt"
                )));
            }
        }
        Ok(())
    }

    /// `[class]` header lines followed by one prompt per line. Blank lines
    /// and lines starting with `#` are ignored.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut classes: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim().to_string();
                if classes.contains_key(&name) {
                    return Err(Error::format(
                        path,
                        format!("class `{name}` declared twice"),
                    ));
                }
                classes.insert(name.clone(), Vec::new());
                current = Some(name);
            } else {
                let c = current.as_ref().ok_or_else(|| {
                    Error::format(
                        path,
                        format!("line {}: prompt before any [class] header", n + 1),
                    )
                })?;
                classes.get_mut(c).expect("declared").push(line.to_string());
            }
        }
        Self::new(classes).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for (c, prompts) in &self.classes {
            s.push_str(&format!("[{c}]\n"));
            for p in prompts {
                s.push_str(p);
                s.push('\n');
            }
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ZeroShotResult {
    pub probabilities: BTreeMap<String, f64>,
    pub predicted: String,
}

/// Unit-norm projection of one prompt through the CLS pathway.
pub fn embed_prompt(
    model: &Model,
    store: &ParamStore<f32>,
    vocab: &Vocabulary,
    text: &str,
) -> Result<Vec<f64>> {
    let seq = vocab.tokenize(text);
    if seq.is_empty() {
        return Err(Error::InvalidArgument("empty prompt".into()));
    }
    let mut input = vec![BOS];
    input.extend(seq.ids);
    let g = Graph::inference();
    Ok(model.embed_text(&g, store, &input)?.value().to_f64_vec())
}

/// Unit-norm slide projection of one specimen.
pub fn embed_slide(
    model: &Model,
    store: &ParamStore<f32>,
    tiles: &Tensor<f32>,
) -> Result<Vec<f64>> {
    let g = Graph::inference();
    let t = g.constant(tiles.clone());
    let enc = model.encode(&g, store, &t)?;
    Ok(model
        .project_slides(&g, store, &enc.slide_embedding)?
        .value()
        .to_f64_vec())
}

/// Every prompt of a set embedded once, labelled by class.
#[derive(Clone, Debug)]
pub struct PromptEmbeddings {
    pub entries: Vec<(String, Vec<f64>)>,
}

impl PromptEmbeddings {
    pub fn new(
        model: &Model,
        store: &ParamStore<f32>,
        vocab: &Vocabulary,
        prompts: &PromptSet,
    ) -> Result<Self> {
        prompts.validate()?;
        let mut entries = Vec::new();
        for (c, list) in &prompts.classes {
            for p in list {
                entries.push((c.clone(), embed_prompt(model, store, vocab, p)?));
            }
        }
        Ok(Self { entries })
    }
}

/// One softmax at temperature `tau` over the similarities to every prompt,
/// then each class's probability is the sum over its prompts. The argmax
/// goes to the lexicographically first class on ties.
pub fn zero_shot_classify(
    slide: &[f64],
    prompts: &PromptEmbeddings,
    tau: f64,
) -> Result<ZeroShotResult> {
    if prompts.entries.is_empty() {
        return Err(Error::InvalidArgument("empty prompt set".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let logits: Vec<f64> = prompts
        .entries
        .iter()
        .map(|(_, t)| {
            if t.len() != slide.len() {
                return Err(Error::shape(
                    "zero_shot_classify",
                    format!("prompt width {} vs slide {}", t.len(), slide.len()),
                ));
            }
            Ok(slide.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / tau)
        })
        .collect::<Result<_>>()?;
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut probabilities: BTreeMap<String, f64> = BTreeMap::new();
    for ((c, _), e) in prompts.entries.iter().zip(&exps) {
        *probabilities.entry(c.clone()).or_insert(0.0) += e / z;
    }
    if probabilities.len() < 2 {
        return Err(Error::InvalidArgument(
            "zero-shot classification needs at least two classes".into(),
        ));
    }
    let mut predicted: Option<(&String, f64)> = None;
    for (c, &p) in &probabilities {
        if predicted.is_none_or(|(_, best)| p > best) {
            predicted = Some((c, p));
        }
    }
    let predicted = predicted.expect("non-empty").0.clone();
    Ok(ZeroShotResult {
        probabilities,
        predicted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(entries: &[(&str, Vec<f64>)]) -> PromptEmbeddings {
        PromptEmbeddings {
            entries: entries
                .iter()
                .map(|(c, v)| (c.to_string(), v.clone()))
                .collect(),
        }
    }

    #[test]
    fn two_class_value() {
        let p = set(&[("a", vec![1.0, 0.0]), ("b", vec![0.0, 1.0])]);
        let r = zero_shot_classify(&[1.0, 0.0], &p, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((r.probabilities["a"] - e / (e + 1.0)).abs() < 1e-12);
        assert_eq!(r.predicted, "a");
    }

    #[test]
    fn identical_prompts_split_evenly_and_tie_to_first() {
        let p = set(&[("b", vec![1.0, 0.0]), ("a", vec![1.0, 0.0])]);
        let r = zero_shot_classify(&[0.6, 0.8], &p, 0.07).unwrap();
        assert_eq!(r.probabilities["a"], 0.5);
        assert_eq!(r.predicted, "a");
    }

    #[test]
    fn single_class_and_empty_rejected() {
        assert!(zero_shot_classify(&[1.0], &set(&[("a", vec![1.0])]), 1.0).is_err());
        assert!(zero_shot_classify(&[1.0], &set(&[]), 1.0).is_err());
    }

    #[test]
    fn prompt_file_round_trip() {
        let text = "# comment\n[benign]\nbenign tissue\n\n[tumor]\ninvasive carcinoma\ncarcinoma present\n";
        let p = PromptSet::parse(text, Path::new("p")).unwrap();
        assert_eq!(p.classes["tumor"].len(), 2);
        assert_eq!(
            PromptSet::parse(&p.to_file_string(), Path::new("p")).unwrap(),
            p
        );
        assert!(PromptSet::parse("orphan\n", Path::new("p")).is_err());
        assert!(PromptSet::parse("[a]\nx\nx\n", Path::new("p")).is_err());
        assert!(PromptSet::parse("[a]\n", Path::new("p")).is_err());
    }
}
