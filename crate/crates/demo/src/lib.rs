//! Browser bindings for three interactive views: transcript labelling, the
//! attention explorer, and word scoring. Each export returns a JSON string.
//! The plain functions are what the tests call; the `#[wasm_bindgen]`
//! wrappers only convert errors.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use wordintel::alignpool::{self, sharpness};
use wordintel::featio::{synthesize_bundle, PlantMode, PlantedSignalSpec, SynthDims};
use wordintel::fusionhead::sentence_score;
use wordintel::metrics::{word_metrics, WordBatch};
use wordintel::textnorm::{align_and_label, normalize_transcript, OpString, WordLabelSet};

pub fn label_json(reference: &str, response: &str) -> String {
    let r = normalize_transcript(reference);
    let h = normalize_transcript(response);
    let (labels, ops) = align_and_label(&r, &h);
    let pairs: Vec<Value> = ops
        .iter()
        .map(|o| {
            json!({
                "op": o.kind.code().to_string(),
                "ref": o.ref_index.map(|i| r[i].as_str()),
                "hyp": o.hyp_index.map(|j| h[j].as_str()),
            })
        })
        .collect();
    json!({
        "reference": r,
        "response": h,
        "correct": labels.correct,
        "cost": ops.iter().map(|o| o.kind.cost()).sum::<usize>(),
        "ops": OpString(&ops).to_string(),
        "pairs": pairs,
    })
    .to_string()
}

pub fn explorer_json(seed: u64, top_k: usize, planted: &str) -> Result<String, String> {
    let mode: PlantMode = planted.parse()?;
    let dims = SynthDims::default();
    let b = synthesize_bundle(seed, dims, &PlantedSignalSpec::new(mode, seed)).map_err(|e| e.to_string())?;
    let attn = b.cross_attention.as_ref().ok_or("bundle has no attention")?;
    let selection = alignpool::select_top_heads(attn.view(), top_k).map_err(|e| e.to_string())?;

    let mut heads = Vec::new();
    let mut maps = Vec::new();
    for l in 0..dims.layers {
        for h in 0..dims.heads {
            let map = attn.slice(ndarray::s![l, h, .., ..]);
            let rank = selection.pairs.iter().position(|p| *p == (l, h));
            heads.push(json!({
                "layer": l,
                "head": h,
                "sharpness": sharpness(map).map_err(|e| e.to_string())?,
                "rank": rank,
            }));
            maps.push(map.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>());
        }
    }
    let mut profiles = Vec::new();
    for (i, span) in b.char_spans.iter().enumerate() {
        let p = alignpool::word_attention_profile(attn.view(), &selection, i, *span, &b.encoder_mask)
            .map_err(|e| e.to_string())?;
        profiles.push(json!({ "weights": p.weights, "degenerate": p.degenerate }));
    }
    Ok(json!({
        "frames": dims.frames,
        "chars": dims.chars,
        "words": b.words,
        "char_spans": b.char_spans.iter().map(|s| [s.start, s.end]).collect::<Vec<_>>(),
        "encoder_mask": b.encoder_mask,
        "correct": b.labels.correct,
        "heads": heads,
        "maps": maps,
        "profiles": profiles,
    })
    .to_string())
}

/// `probabilities` is comma-separated P(correct); `correct` is a 0/1 string
/// of the same length. A `-` in `correct` masks that word.
pub fn score_json(probabilities: &str, correct: &str, threshold: f64) -> Result<String, String> {
    let p: Vec<f64> = probabilities
        .split([',', ' '])
        .filter(|s| !s.is_empty())
        .map(|s| s.trim().parse::<f64>().map_err(|_| format!("not a number: {s:?}")))
        .collect::<Result<_, _>>()?;
    if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(format!("probability {bad} outside [0, 1]"));
    }
    let marks: Vec<char> = correct.chars().filter(|c| !c.is_whitespace()).collect();
    if marks.len() != p.len() {
        return Err(format!("{} probabilities but {} labels", p.len(), marks.len()));
    }
    let valid: Vec<u8> = marks.iter().map(|c| u8::from(*c != '-')).collect();
    let bits: String = marks.iter().map(|c| if *c == '-' { '0' } else { *c }).collect();
    let c = WordLabelSet::parse_bits(&bits).ok_or("labels must be 0, 1 or -")?;
    let w = word_metrics(
        &[WordBatch {
            probabilities: &p,
            correct: &c,
            valid: &valid,
        }],
        threshold,
    )
    .map_err(|e| e.to_string())?;
    let predicted: String = p
        .iter()
        .zip(&valid)
        .map(|(p, m)| match (*m, *p >= threshold) {
            (0, _) => '-',
            (_, true) => '1',
            _ => '0',
        })
        .collect();
    Ok(json!({
        "predicted": predicted,
        "score": sentence_score(&p, &valid),
        "f1": w.f1,
        "f1_degenerate": w.f1_degenerate,
        "mcc": w.mcc,
        "mcc_degenerate": w.mcc_degenerate,
        "accuracy": w.accuracy,
        "exact_match": w.exact_match,
        "confusion": w.confusion,
    })
    .to_string())
}

#[wasm_bindgen]
pub fn label_alignment(reference: &str, response: &str) -> String {
    label_json(reference, response)
}

#[wasm_bindgen]
pub fn attention_explorer(seed: u32, top_k: u32, planted: &str) -> Result<String, JsError> {
    explorer_json(u64::from(seed), top_k as usize, planted).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn score_words(probabilities: &str, correct: &str, threshold: f64) -> Result<String, JsError> {
    score_json(probabilities, correct, threshold).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_example() {
        let v: Value = serde_json::from_str(&label_json("The cat sat on the mat.", "the cat sat on mat")).unwrap();
        assert_eq!(v["correct"], json!([1, 1, 1, 1, 0, 1]));
        assert_eq!(v["ops"], "MMMMDM");
        assert_eq!(v["pairs"][4]["hyp"], Value::Null);
    }

    #[test]
    fn explorer_shapes() {
        let v: Value = serde_json::from_str(&explorer_json(3, 4, "local").unwrap()).unwrap();
        assert_eq!(v["heads"].as_array().unwrap().len(), 12);
        let ranked = v["heads"].as_array().unwrap().iter().filter(|h| !h["rank"].is_null()).count();
        assert_eq!(ranked, 4);
        assert_eq!(v["maps"][0].as_array().unwrap().len(), 32);
        assert_eq!(v["profiles"].as_array().unwrap().len(), 8);
        let total: f64 = v["profiles"][0]["weights"].as_array().unwrap().iter().map(|w| w.as_f64().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-6);
        assert!(explorer_json(3, 4, "bogus").is_err());
    }

    #[test]
    fn scoring() {
        let v: Value = serde_json::from_str(&score_json("0.9, 0.2, 0.7, 0.1", "10-0", 0.5).unwrap()).unwrap();
        assert_eq!(v["predicted"], "10-0");
        assert_eq!(v["f1"], 1.0);
        assert_eq!(v["exact_match"], 1.0);
        let s = v["score"].as_f64().unwrap();
        assert!((s - 40.0).abs() < 1e-9);
        assert!(score_json("0.5", "11", 0.5).is_err());
        assert!(score_json("1.5", "1", 0.5).is_err());
    }
}
