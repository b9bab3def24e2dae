//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::{Array1, Array2, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wordintel::alignpool::{
    global_pool, local_pool, sharpness, word_attention_profile, HeadSelection, WordAttentionProfile,
};
use wordintel::featio::{
    container, synthesize_bundle, FeatError, FeatureBundle, PlantMode, PlantedSignalSpec, SynthDims, BUNDLE_MAGIC,
};
use wordintel::fusionhead::{
    backward, build_features, forward, masked_bce_logits, masked_bce_probs, sentence_score, Batch, Checkpoint,
    CheckpointMeta, FusionConfig, FusionMode, FusionParams, HeadPolicy, UtteranceFeatures,
};
use wordintel::metrics::{word_metrics, WordBatch};
use wordintel::textnorm::{align, align_and_label, OpKind};
use wordintel::trainer::{make_grouped_folds, predict, train_seed, TrainConfig};

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    let checks: [(&str, Check); 10] = [
        ("gradient oracle", gradient_oracle),
        ("sentence score and masked loss invariants", score_and_loss_invariants),
        ("labeler oracle", labeler_oracle),
        ("metric oracle", metric_oracle),
        ("sharpness properties", sharpness_properties),
        ("pooling properties", pooling_properties),
        ("serialization", serialization),
        ("synthetic learnability", learnability),
        ("fold discipline", fold_discipline),
        ("determinism", determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in checks {
        let start = Instant::now();
        let result = panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  {name:<44} {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name:<44} {detail} [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- gradients

fn random_batch(rng: &mut ChaCha8Rng, cfg: &FusionConfig, n: usize) -> Batch {
    let mut m = |r: usize, c: usize| Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.5..1.5));
    let decoder = m(n, cfg.decoder_dim);
    let local = cfg.mode.uses_local().then(|| m(n, cfg.encoder_dim));
    let global = cfg.mode.uses_global().then(|| m(n, cfg.encoder_dim));
    let severity = (0..n).map(|_| rng.random_range(0..4)).collect();
    let correct: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..2u8))).collect();
    let mut valid: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.75)))).collect();
    valid[0] = 1.0;
    let correct = correct.iter().zip(&valid).map(|(c, m)| c * m).collect();
    Batch {
        decoder,
        local,
        global,
        severity,
        correct,
        valid,
        offsets: vec![0, n],
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn gradient_oracle() -> Result<String, String> {
    const H: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut configs = 0;
    for mode in FusionMode::ALL {
        for trial in 0..3 {
            let cfg = FusionConfig {
                mode,
                decoder_dim: rng.random_range(2..6),
                encoder_dim: rng.random_range(2..6),
                proj_dim: rng.random_range(2..5),
                severity_dim: rng.random_range(1..4),
                hidden_dim: rng.random_range(3..7),
                dropout_rate: [0.0, 0.1, 0.3][trial],
                layernorm_epsilon: 1e-5,
                head_selection: HeadPolicy::All,
            };
            configs += 1;
            let mut params = FusionParams::init(&cfg, rng.random());
            // Move LayerNorm away from its initial values so its gradients are
            // exercised at a generic point.
            for (_, v, _) in params.slices_mut() {
                v.iter_mut().for_each(|x| *x += rng.random_range(-0.2..0.2));
            }
            let words = rng.random_range(3..9);
            let batch = random_batch(&mut rng, &cfg, words);
            let seed = Some(rng.random::<u64>());
            let norm = batch.valid_count();
            let loss = |p: &FusionParams, b: &Batch| -> f64 {
                let f = forward(p, &cfg, b, seed).expect("finite forward");
                masked_bce_logits(f.logits.as_slice().unwrap(), &b.correct, &b.valid).unwrap()
            };
            let fwd = forward(&params, &cfg, &batch, seed).map_err(|e| e.to_string())?;
            let grads = backward(&params, &cfg, &batch, &fwd, norm);

            let analytic: Vec<(&'static str, Vec<f64>)> =
                grads.params.views().iter().map(|v| (v.name, v.values.to_vec())).collect();
            for (t, (name, a)) in analytic.iter().enumerate() {
                for k in 0..a.len() {
                    let mut plus = params.clone();
                    plus.slices_mut()[t].1[k] += H;
                    let mut minus = params.clone();
                    minus.slices_mut()[t].1[k] -= H;
                    let numeric = (loss(&plus, &batch) - loss(&minus, &batch)) / (2.0 * H);
                    let e = rel_err(a[k], numeric);
                    worst = worst.max(e);
                    checked += 1;
                    ensure(e < 1e-4, || {
                        format!("{mode} {name}[{k}]: analytic {} vs numeric {numeric} (rel {e:.2e})", a[k])
                    })?;
                }
            }

            let mut inputs: Vec<(&str, &Array2<f64>, fn(&mut Batch) -> &mut Array2<f64>)> =
                vec![("decoder", &grads.inputs.decoder, |b| &mut b.decoder)];
            if let Some(g) = &grads.inputs.local {
                inputs.push(("local", g, |b| b.local.as_mut().unwrap()));
            }
            if let Some(g) = &grads.inputs.global {
                inputs.push(("global", g, |b| b.global.as_mut().unwrap()));
            }
            for (name, a, field) in inputs {
                for ((i, j), av) in a.indexed_iter() {
                    let mut plus = batch.clone();
                    field(&mut plus)[[i, j]] += H;
                    let mut minus = batch.clone();
                    field(&mut minus)[[i, j]] -= H;
                    let numeric = (loss(&params, &plus) - loss(&params, &minus)) / (2.0 * H);
                    let e = rel_err(*av, numeric);
                    worst = worst.max(e);
                    checked += 1;
                    ensure(e < 1e-4, || format!("{mode} input {name}[{i},{j}]: {av} vs {numeric} (rel {e:.2e})"))?;
                }
            }
        }
    }
    Ok(format!("{configs} configs, {checked} partials, max rel err {worst:.2e}"))
}

// ------------------------------------------------------ score / loss fuzzing

fn score_and_loss_invariants() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..1000 {
        let n = rng.random_range(1..40);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(1e-6..1.0 - 1e-6)).collect();
        let mut valid: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.6))).collect();
        let keep = rng.random_range(0..n);
        valid[keep] = 1;
        let c: Vec<f64> = valid.iter().map(|m| if *m == 1 { f64::from(rng.random_range(0..2u8)) } else { 0.0 }).collect();
        let m: Vec<f64> = valid.iter().map(|v| f64::from(*v)).collect();

        let y = sentence_score(&p, &valid).ok_or("valid words present but no score")?;
        let (num, den) = p
            .iter()
            .zip(&valid)
            .fold((0.0, 0.0), |(s, k), (p, v)| if *v == 1 { (s + p, k + 1.0) } else { (s, k) });
        let expected = 100.0 * num / den;
        ensure((y - expected).abs() <= 1e-9, || format!("case {case}: score {y} vs {expected}"))?;
        ensure((0.0..=100.0).contains(&y), || format!("case {case}: score {y} out of range"))?;

        let perturbed: Vec<f64> = p
            .iter()
            .zip(&valid)
            .map(|(p, v)| if *v == 0 { rng.random_range(1e-6..1.0 - 1e-6) } else { *p })
            .collect();
        let y2 = sentence_score(&perturbed, &valid).unwrap();
        ensure(y == y2, || format!("case {case}: masked perturbation moved score {y} → {y2}"))?;
        let l1 = masked_bce_probs(&p, &c, &m).unwrap();
        let l2 = masked_bce_probs(&perturbed, &c, &m).unwrap();
        ensure(l1 == l2, || format!("case {case}: masked perturbation moved loss {l1} → {l2}"))?;
        let logit = |q: &[f64]| q.iter().map(|x| (x / (1.0 - x)).ln()).collect::<Vec<_>>();
        let ll = masked_bce_logits(&logit(&p), &c, &m).unwrap();
        ensure((ll - l1).abs() <= 1e-9 * l1.max(1.0), || format!("case {case}: logit loss {ll} vs {l1}"))?;
    }
    ensure(sentence_score(&[0.3, 0.9], &[0, 0]).is_none(), || "all-masked utterance was scored".into())?;
    Ok("1000 fuzzed utterances".into())
}

// ------------------------------------------------------------------ labeler

const ALPHABET: [&str; 3] = ["a", "b", "c"];

fn sequences(max_len: usize) -> Vec<Vec<String>> {
    let mut out = vec![vec![]];
    let mut frontier: Vec<Vec<String>> = vec![vec![]];
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|s| {
                ALPHABET.iter().map(move |w| {
                    let mut t = s.clone();
                    t.push((*w).to_owned());
                    t
                })
            })
            .collect();
        out.extend(frontier.iter().cloned());
    }
    out
}

fn op_rank(k: OpKind) -> u8 {
    match k {
        OpKind::Match => 0,
        OpKind::Substitution => 1,
        OpKind::Deletion => 2,
        OpKind::Insertion => 3,
    }
}

/// Every alignment path, as ops in reading order.
fn all_paths(r: &[String], h: &[String]) -> Vec<Vec<OpKind>> {
    if r.is_empty() && h.is_empty() {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    if !r.is_empty() && !h.is_empty() {
        let k = if r[r.len() - 1] == h[h.len() - 1] { OpKind::Match } else { OpKind::Substitution };
        for mut p in all_paths(&r[..r.len() - 1], &h[..h.len() - 1]) {
            p.push(k);
            out.push(p);
        }
    }
    if !r.is_empty() {
        for mut p in all_paths(&r[..r.len() - 1], h) {
            p.push(OpKind::Deletion);
            out.push(p);
        }
    }
    if !h.is_empty() {
        for mut p in all_paths(r, &h[..h.len() - 1]) {
            p.push(OpKind::Insertion);
            out.push(p);
        }
    }
    out
}

/// Key ordering alignments: total cost, then ops read from the end with
/// M < S < D < I.
fn path_key(p: &[OpKind]) -> (usize, Vec<u8>) {
    (p.iter().map(|k| k.cost()).sum(), p.iter().rev().map(|k| op_rank(*k)).collect())
}

/// Memoized search for the minimum path key.
fn best_path(r: &[String], h: &[String]) -> Vec<OpKind> {
    let (n, m) = (r.len(), h.len());
    let mut best: Vec<Vec<Option<(usize, Vec<u8>)>>> = vec![vec![None; m + 1]; n + 1];
    best[0][0] = Some((0, vec![]));
    for i in 0..=n {
        for j in 0..=m {
            if i == 0 && j == 0 {
                continue;
            }
            let mut cands: Vec<(usize, Vec<u8>)> = Vec::new();
            let mut extend = |prev: &(usize, Vec<u8>), k: OpKind| {
                let mut seq = vec![op_rank(k)];
                seq.extend_from_slice(&prev.1);
                cands.push((prev.0 + k.cost(), seq));
            };
            if i > 0 && j > 0 {
                let k = if r[i - 1] == h[j - 1] { OpKind::Match } else { OpKind::Substitution };
                extend(best[i - 1][j - 1].as_ref().unwrap(), k);
            }
            if i > 0 {
                extend(best[i - 1][j].as_ref().unwrap(), OpKind::Deletion);
            }
            if j > 0 {
                extend(best[i][j - 1].as_ref().unwrap(), OpKind::Insertion);
            }
            best[i][j] = cands.into_iter().min();
        }
    }
    let kinds = [OpKind::Match, OpKind::Substitution, OpKind::Deletion, OpKind::Insertion];
    best[n][m].as_ref().unwrap().1.iter().rev().map(|r| kinds[*r as usize]).collect()
}

fn labels_of(n: usize, path: &[OpKind]) -> Vec<u8> {
    let mut labels = Vec::with_capacity(n);
    for k in path {
        match k {
            OpKind::Match => labels.push(1),
            OpKind::Substitution | OpKind::Deletion => labels.push(0),
            OpKind::Insertion => {}
        }
    }
    labels
}

fn check_pair(r: &[String], h: &[String], expected: &[OpKind]) -> Result<(), String> {
    let (cost, ops) = align(r, h);
    let (labels, ops2) = align_and_label(r, h);
    let kinds: Vec<OpKind> = ops.iter().map(|o| o.kind).collect();
    ensure(ops == ops2, || "align and align_and_label disagree".into())?;
    ensure(cost == path_key(expected).0, || format!("{r:?} vs {h:?}: cost {cost}, expected {}", path_key(expected).0))?;
    ensure(kinds == expected, || format!("{r:?} vs {h:?}: ops {kinds:?}, expected {expected:?}"))?;
    ensure(labels.correct == labels_of(r.len(), expected), || format!("{r:?} vs {h:?}: labels differ"))
}

fn labeler_oracle() -> Result<String, String> {
    let short = sequences(4);
    let mut exhaustive = 0;
    for r in &short {
        for h in &short {
            let best = all_paths(r, h).into_iter().min_by_key(|p| path_key(p)).unwrap();
            check_pair(r, h, &best)?;
            exhaustive += 1;
        }
    }
    let long = sequences(6);
    let mut searched = 0;
    for r in &long {
        for h in &long {
            check_pair(r, h, &best_path(r, h))?;
            searched += 1;
        }
    }
    Ok(format!(
        "{exhaustive} pairs (len ≤ 4) against every path, {searched} pairs (len ≤ 6) against memoized search"
    ))
}

// ------------------------------------------------------------------ metrics

#[derive(Default, PartialEq, Debug, Clone, Copy)]
struct Counts {
    tp: u64,
    fp: u64,
    tn: u64,
    fn_: u64,
}

fn brute(pred_incorrect: &[bool], actual_incorrect: &[bool]) -> Counts {
    let mut c = Counts::default();
    for (p, a) in pred_incorrect.iter().zip(actual_incorrect) {
        match (p, a) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

fn phi(x: &[bool], y: &[bool]) -> f64 {
    let n = x.len() as f64;
    let xs: Vec<f64> = x.iter().map(|b| f64::from(u8::from(*b))).collect();
    let ys: Vec<f64> = y.iter().map(|b| f64::from(u8::from(*b))).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = xs.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ys.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

fn compare_metrics(utterances: &[(Vec<f64>, Vec<u8>, Vec<u8>)]) -> Result<(), String> {
    let batches: Vec<WordBatch<'_>> = utterances
        .iter()
        .map(|(p, c, m)| WordBatch {
            probabilities: p,
            correct: c,
            valid: m,
        })
        .collect();
    let mut pred = Vec::new();
    let mut act = Vec::new();
    let mut exact = 0usize;
    let mut scored = 0usize;
    for (p, c, m) in utterances {
        let mut all = true;
        let mut any = false;
        for ((p, c), m) in p.iter().zip(c).zip(m) {
            if *m == 1 {
                any = true;
                pred.push(*p < 0.5);
                act.push(*c == 0);
                all &= (*p >= 0.5) == (*c == 1);
            }
        }
        if any {
            scored += 1;
            exact += usize::from(all);
        }
    }
    let got = word_metrics(&batches, 0.5);
    if pred.is_empty() {
        return ensure(got.is_err(), || "no valid words but metrics returned".into());
    }
    let w = got.map_err(|e| e.to_string())?;
    let b = brute(&pred, &act);
    let have = Counts {
        tp: w.confusion.tp,
        fp: w.confusion.fp,
        tn: w.confusion.tn,
        fn_: w.confusion.fn_,
    };
    ensure(have == b, || format!("counts {have:?} vs {b:?}"))?;
    let (tp, fp, tn, fn_) = (b.tp as f64, b.fp as f64, b.tn as f64, b.fn_ as f64);
    let f1 = if b.tp + b.fp + b.fn_ == 0 { 1.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
    let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    let mcc = if den == 0.0 { 0.0 } else { (tp * tn - fp * fn_) / den.sqrt() };
    let acc = (tp + tn) / (tp + fp + tn + fn_);
    let em = exact as f64 / scored as f64;
    ensure(w.f1 == f1, || format!("f1 {} vs {f1}", w.f1))?;
    ensure(w.mcc == mcc, || format!("mcc {} vs {mcc}", w.mcc))?;
    ensure(w.accuracy == acc, || format!("accuracy {} vs {acc}", w.accuracy))?;
    ensure(w.exact_match == em, || format!("exact match {} vs {em}", w.exact_match))?;
    // Independent routes: harmonic mean of precision and recall, phi coefficient.
    if b.tp > 0 {
        let (prec, rec) = (tp / (tp + fp), tp / (tp + fn_));
        let hm = 2.0 * prec * rec / (prec + rec);
        ensure((hm - w.f1).abs() < 1e-12, || format!("f1 {} vs harmonic mean {hm}", w.f1))?;
    }
    let ph = phi(&pred, &act);
    ensure((ph - w.mcc).abs() < 1e-12, || format!("mcc {} vs phi {ph}", w.mcc))?;
    let inv: Vec<bool> = pred.iter().map(|x| !x).collect();
    let inv_act: Vec<bool> = act.iter().map(|x| !x).collect();
    ensure((phi(&inv, &inv_act) - w.mcc).abs() < 1e-12, || "mcc not invariant under joint inversion".into())
}

fn metric_oracle() -> Result<String, String> {
    let mut cases = 0u64;
    for n in 1..=12usize {
        for bits in 0u32..(1 << n) {
            // Correct labels from the bits, predictions from each rotation of
            // the complement mixed with the labels themselves.
            let c: Vec<u8> = (0..n).map(|i| ((bits >> i) & 1) as u8).collect();
            let m = vec![1u8; n];
            for shift in 0..n.min(4) {
                let p: Vec<f64> = (0..n)
                    .map(|i| if (bits >> ((i + shift) % n)) & 1 == 1 { 0.75 } else { 0.25 })
                    .collect();
                compare_metrics(&[(p, c.clone(), m.clone())])?;
                cases += 1;
            }
        }
    }
    // Every (prediction, label) pair over all binary vectors of length ≤ 12,
    // read as halves.
    for len in (2..=12usize).step_by(2) {
        let n = len / 2;
        for bits in 0u32..(1 << len) {
            let c: Vec<u8> = (0..n).map(|i| ((bits >> i) & 1) as u8).collect();
            let p: Vec<f64> = (0..n).map(|i| if (bits >> (n + i)) & 1 == 1 { 0.5 } else { 0.4999 }).collect();
            compare_metrics(&[(p, c, vec![1; n])])?;
            cases += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let k = rng.random_range(1..6);
        let utts: Vec<(Vec<f64>, Vec<u8>, Vec<u8>)> = (0..k)
            .map(|_| {
                let n = rng.random_range(0..10);
                let p = (0..n)
                    .map(|_| if rng.random_bool(0.1) { 0.5 } else { rng.random::<f64>() })
                    .collect();
                let m: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.8))).collect();
                let c = m.iter().map(|m| if *m == 1 { rng.random_range(0..2) } else { 0 }).collect();
                (p, c, m)
            })
            .collect();
        compare_metrics(&utts)?;
        cases += 1;
    }
    Ok(format!("{cases} cases, counts and values exact"))
}

// ---------------------------------------------------------------- sharpness

fn sharpness_properties() -> Result<String, String> {
    for n in [2usize, 4, 8, 16] {
        let id = Array2::<f64>::eye(n);
        let s = sharpness(id.view()).map_err(|e| e.to_string())?;
        ensure((s - 2.0 * n as f64).abs() < 1e-9, || format!("S(I_{n}) = {s}"))?;
        let u = Array2::<f64>::from_elem((n, n), 1.0 / n as f64);
        let s = sharpness(u.view()).map_err(|e| e.to_string())?;
        ensure((s - 2.0 * (n as f64).sqrt()).abs() < 1e-9, || format!("S(U_{n}) = {s}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..100 {
        let (r, c) = (rng.random_range(1..12), rng.random_range(1..30));
        let a = Array2::<f64>::from_shape_simple_fn((r, c), || rng.random::<f64>());
        let s = sharpness(a.view()).unwrap();
        let mut rows: Vec<usize> = (0..r).collect();
        let mut cols: Vec<usize> = (0..c).collect();
        rows.shuffle(&mut rng);
        cols.shuffle(&mut rng);
        let p = Array2::from_shape_fn((r, c), |(i, j)| a[[rows[i], cols[j]]]);
        let sp = sharpness(p.view()).unwrap();
        ensure((sp - s).abs() <= 1e-12 * s, || format!("case {case}: permuted {sp} vs {s}"))?;
        let k = rng.random_range(0.0..20.0);
        let sk = sharpness((&a * k).view()).unwrap();
        ensure((sk - k * s).abs() <= 1e-12 * (k * s).max(1e-300), || format!("case {case}: S({k}A) = {sk}, k·S = {}", k * s))?;
    }
    Ok("n ∈ {2,4,8,16}; 100 random matrices".into())
}

// ------------------------------------------------------------------ pooling

fn pooling_properties() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut profiles = 0;
    for case in 0..200 {
        let (l, de) = (rng.random_range(2..40), rng.random_range(1..8));
        let e = Array2::<f32>::from_shape_simple_fn((l, de), || rng.random_range(-3.0..3.0));
        let t = rng.random_range(0..l);
        let mut w = vec![0.0; l];
        w[t] = 1.0;
        let one_hot = WordAttentionProfile {
            word_index: 0,
            weights: w,
            degenerate: false,
        };
        let r = local_pool(&one_hot, e.view());
        let frame: Array1<f64> = e.row(t).mapv(f64::from);
        ensure(r == frame, || format!("case {case}: one-hot pool is not frame {t}"))?;

        let mut mask: Vec<u8> = (0..l).map(|_| u8::from(rng.random_bool(0.7))).collect();
        mask[rng.random_range(0..l)] = 1;
        let valid = mask.iter().filter(|m| **m == 1).count() as f64;
        let uniform = WordAttentionProfile {
            word_index: 0,
            weights: mask.iter().map(|m| f64::from(*m) / valid).collect(),
            degenerate: false,
        };
        let g = global_pool(e.view(), &mask).unwrap();
        let u = local_pool(&uniform, e.view());
        let diff = (&g - &u).mapv(f64::abs).fold(0.0f64, |a, b| a.max(*b));
        ensure(diff < 1e-6, || format!("case {case}: global vs uniform local differ by {diff}"))?;

        let (layers, heads, chars) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(2..10));
        let mut attn = Array4::<f32>::from_shape_simple_fn((layers, heads, chars, l), || rng.random::<f32>());
        for mut row in attn.rows_mut() {
            let s: f32 = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let pairs: Vec<(usize, usize)> = (0..layers).flat_map(|a| (0..heads).map(move |b| (a, b))).collect();
        let sel = HeadSelection {
            scores: vec![0.0; pairs.len()],
            pairs,
        };
        let start = rng.random_range(0..chars);
        let end = rng.random_range(start + 1..=chars);
        let span = wordintel::textnorm::Span::new(start, end);
        let p = word_attention_profile(attn.view(), &sel, 0, span, &mask).map_err(|e| e.to_string())?;
        if !p.degenerate {
            let total: f64 = p.weights.iter().sum();
            ensure((total - 1.0).abs() < 1e-6, || format!("case {case}: weights sum to {total}"))?;
            profiles += 1;
        }
        ensure(
            p.weights.iter().zip(&mask).all(|(w, m)| *m == 1 || *w == 0.0),
            || format!("case {case}: weight on masked frame"),
        )?;
    }
    Ok(format!("200 cases, {profiles} non-degenerate profiles"))
}

// ------------------------------------------------------------ serialization

fn serialization() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dims = SynthDims::default();
    let mut rejected = 0;
    for seed in 0..20u64 {
        let plant = [PlantMode::Decoder, PlantMode::Local, PlantMode::Noise][seed as usize % 3];
        let b = synthesize_bundle(seed, dims, &PlantedSignalSpec::new(plant, 4)).map_err(|e| e.to_string())?;
        let path = tmp.path().join(format!("{seed}.wlb"));
        wordintel::featio::write_bundle(&b, &path).map_err(|e| e.to_string())?;
        let first = fs::read(&path).unwrap();
        let back = wordintel::featio::read_bundle(&path).map_err(|e| e.to_string())?;
        ensure(back == b, || format!("bundle {seed} changed on round trip"))?;
        wordintel::featio::write_bundle(&back, &path).unwrap();
        ensure(fs::read(&path).unwrap() == first, || format!("bundle {seed} rewrite differs"))?;

        let mut corrupt: Vec<(String, Vec<u8>)> = Vec::new();
        corrupt.push(("truncated".into(), first[..first.len() - 1].to_vec()));
        corrupt.push(("extended".into(), [first.as_slice(), &[0]].concat()));
        let mut magic = first.clone();
        magic[0] = b'X';
        corrupt.push(("magic".into(), magic));
        let mut len = first.clone();
        len[4..12].copy_from_slice(&u64::MAX.to_le_bytes());
        corrupt.push(("manifest length".into(), len));
        let c = container::decode(BUNDLE_MAGIC, &first).unwrap();
        let mut manifest = c.manifest.clone();
        manifest.format_version = 2;
        corrupt.push(("version".into(), reencode(&manifest, &c.payload)));
        let mut manifest = c.manifest.clone();
        manifest.tensors[0].shape[0] += 1;
        corrupt.push(("shape".into(), reencode(&manifest, &c.payload)));
        let mut manifest = c.manifest.clone();
        if manifest.tensors.len() > 1 {
            manifest.tensors[1].offset = manifest.tensors[0].offset;
            corrupt.push(("overlap".into(), reencode(&manifest, &c.payload)));
        }
        for (what, bytes) in corrupt {
            match FeatureBundle::from_bytes(&bytes) {
                Err(FeatError::CorruptManifest(_) | FeatError::ShapeMismatch(_) | FeatError::UnsupportedVersion(_)) => {
                    rejected += 1
                }
                Err(e) => return Err(format!("bundle {seed} {what}: unexpected error {e}")),
                Ok(_) => return Err(format!("bundle {seed}: {what} corruption accepted")),
            }
        }
    }
    for mode in FusionMode::ALL {
        let config = FusionConfig {
            mode,
            decoder_dim: 16,
            encoder_dim: 16,
            proj_dim: 8,
            severity_dim: 4,
            hidden_dim: 8,
            ..FusionConfig::default()
        };
        let ck = Checkpoint {
            params: FusionParams::init(&config, 3),
            config,
            meta: CheckpointMeta {
                seed: 3,
                fold: 1,
                epoch: 2,
                step: 9,
                val_f1: 0.5,
            },
        };
        let bytes = ck.to_bytes().map_err(|e| e.to_string())?;
        let back = Checkpoint::from_bytes(&bytes).map_err(|e| e.to_string())?;
        ensure(back == ck && back.to_bytes().unwrap() == bytes, || format!("{mode} checkpoint round trip"))?;
        ensure(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err(), || "truncated checkpoint accepted".into())?;
    }
    Ok(format!("20 bundles and 4 checkpoints bit-exact; {rejected} corruptions rejected"))
}

fn reencode(manifest: &container::Manifest, payload: &[u8]) -> Vec<u8> {
    let json = serde_json::to_vec(manifest).unwrap();
    let mut out = BUNDLE_MAGIC.to_vec();
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    out
}

// -------------------------------------------------------------- learnability

fn learn_config() -> TrainConfig {
    TrainConfig {
        proj_dim: 32,
        severity_dim: 8,
        hidden_dim: 64,
        batch_size: 32,
        ..TrainConfig::default()
    }
}

fn dataset(plant: PlantMode, mode: FusionMode, seeds: std::ops::Range<u64>, per_scene: u64) -> Vec<UtteranceFeatures> {
    let dims = SynthDims::default();
    let spec = PlantedSignalSpec::new(plant, 99);
    let cfg = learn_config().fusion_config(mode, dims.decoder_dim, dims.encoder_dim);
    seeds
        .map(|s| {
            let mut b = synthesize_bundle(s, dims, &spec).unwrap();
            b.scene_id = format!("scene{}", s / per_scene);
            build_features(&b, &cfg).unwrap()
        })
        .collect()
}

fn held_out_f1(plant: PlantMode, mode: FusionMode, seed: u64) -> f64 {
    let cfg = learn_config();
    let dims = SynthDims::default();
    let fusion = cfg.fusion_config(mode, dims.decoder_dim, dims.encoder_dim);
    let train = dataset(plant, mode, 0..1000, 2);
    let test = dataset(plant, mode, 50_000..50_400, 2);
    let (_, outcomes) = train_seed(&train, &fusion, &cfg, seed, 5).unwrap();
    let ckpts: Vec<Checkpoint> = outcomes.into_iter().map(|o| o.checkpoint).collect();
    let preds = predict(&test, &ckpts, cfg.chunk_size).unwrap();
    let batches: Vec<WordBatch<'_>> = preds
        .iter()
        .zip(&test)
        .map(|(p, u)| WordBatch {
            probabilities: &p.probabilities,
            correct: &u.correct,
            valid: &u.valid,
        })
        .collect();
    word_metrics(&batches, 0.5).unwrap().f1
}

fn learnability() -> Result<String, String> {
    let dec = held_out_f1(PlantMode::Decoder, FusionMode::DecoderOnly, 0);
    ensure(dec >= 0.95, || format!("decoder plant, decoder mode: F1 {dec:.3} < 0.95"))?;
    let mut gaps = Vec::new();
    for seed in 0..5 {
        let joint = held_out_f1(PlantMode::Local, FusionMode::Joint, seed);
        let only = held_out_f1(PlantMode::Local, FusionMode::DecoderOnly, seed);
        ensure(joint - only >= 0.10, || format!("seed {seed}: joint {joint:.3} vs decoder {only:.3}"))?;
        gaps.push(format!("{joint:.3}/{only:.3}"));
    }
    Ok(format!("decoder plant F1 {dec:.3}; local plant joint/decoder per seed {}", gaps.join(" ")))
}

// -------------------------------------------------------------------- folds

fn fold_discipline() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for case in 0..100 {
        let scenes = rng.random_range(5..80);
        let n = rng.random_range(scenes..scenes * 4);
        let mut ids: Vec<String> = (0..scenes).map(|s| format!("S{s:03}")).collect();
        ids.extend((scenes..n).map(|_| format!("S{:03}", rng.random_range(0..scenes))));
        ids.shuffle(&mut rng);
        let seed = rng.random::<u64>();
        let plan = make_grouped_folds(ids.iter().map(String::as_str), 5, seed).map_err(|e| e.to_string())?;
        let mut seen: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
        let mut hits = vec![0usize; n];
        for k in 0..5 {
            let (train, val) = plan.split(ids.iter().map(String::as_str), k);
            ensure(train.len() + val.len() == n, || format!("case {case}: fold {k} loses utterances"))?;
            for v in val {
                hits[v] += 1;
                seen.entry(ids[v].as_str()).or_default().insert(k);
            }
        }
        ensure(hits.iter().all(|h| *h == 1), || format!("case {case}: utterance validated ≠ once"))?;
        ensure(seen.values().all(|f| f.len() == 1), || format!("case {case}: scene in two folds"))?;
        let mut sizes = [0usize; 5];
        for f in plan.assignment.values() {
            sizes[*f] += 1;
        }
        let spread = sizes.iter().max().unwrap() - sizes.iter().min().unwrap();
        ensure(spread <= 1, || format!("case {case}: fold sizes {sizes:?}"))?;
        let again = make_grouped_folds(ids.iter().map(String::as_str), 5, seed).unwrap();
        ensure(again == plan, || format!("case {case}: plan not reproducible"))?;
    }
    Ok("100 random scene sets".into())
}

// -------------------------------------------------------------- determinism

fn run_pipeline(dir: &Path, workers: &str) -> Result<Vec<(String, Vec<u8>)>, String> {
    let exe = env!("CARGO_BIN_EXE_wordintel");
    fs::write(dir.join("cfg.toml"), "epochs = 3\nproj_dim = 16\nseverity_dim = 8\nhidden_dim = 32\nbatch_size = 16\n")
        .unwrap();
    let steps: Vec<Vec<&str>> = vec![
        vec!["synth", "--seed", "7", "--count", "160", "--planted", "local", "--holdout", "0.25", "--out", "data"],
        vec![
            "train", "--config", "cfg.toml", "--data", "data", "--split", "train", "--mode", "joint", "--seeds", "2",
            "--folds", "5", "--seed", "7", "--out", "run", "--workers", workers,
        ],
        vec![
            "predict", "--checkpoints", "run", "--data", "data", "--split", "test", "--out", "out/predictions.jsonl",
            "--workers", workers,
        ],
        vec!["evaluate", "--predictions", "out/predictions.jsonl", "--labels", "data/labels.tsv", "--out", "out/report.json"],
    ];
    for args in steps {
        let out = Command::new(exe).current_dir(dir).args(&args).output().map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)));
        }
    }
    let mut files: Vec<String> = fs::read_dir(dir.join("run"))
        .unwrap()
        .map(|e| format!("run/{}", e.unwrap().file_name().to_string_lossy()))
        .filter(|f| !f.ends_with("manifest.json"))
        .collect();
    files.sort();
    files.extend(["out/predictions.jsonl", "out/report.json", "out/report.txt"].map(String::from));
    Ok(files.into_iter().map(|f| (f.clone(), fs::read(dir.join(&f)).unwrap())).collect())
}

fn determinism() -> Result<String, String> {
    let runs: Vec<(&str, tempfile::TempDir)> =
        ["1", "1", "4"].into_iter().map(|w| (w, tempfile::tempdir().unwrap())).collect();
    let outputs: Vec<Vec<(String, Vec<u8>)>> =
        runs.iter().map(|(w, d)| run_pipeline(d.path(), w)).collect::<Result<_, _>>()?;
    for (i, out) in outputs.iter().enumerate().skip(1) {
        ensure(out.len() == outputs[0].len(), || "different file sets".into())?;
        for ((name, a), (_, b)) in outputs[0].iter().zip(out) {
            ensure(a == b, || format!("{name} differs between run 1 (workers 1) and run {} (workers {})", i + 1, runs[i].0))?;
        }
    }
    Ok(format!("{} artifacts byte-identical over 2 repeats and --workers 1 vs 4", outputs[0].len()))
}
