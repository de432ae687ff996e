use proptest::prelude::*;
use serde_json::{json, Map, Value};

use robust_dataset::attacks::{project_to_ball, AttackConfig};
use robust_dataset::config::config_hash;
use robust_dataset::data::{Dataset, ValueRange};
use robust_dataset::learn::subsample;
use robust_dataset::models::{hinge_objective, Model};
use robust_dataset::theory::{corner_max_hinge, optimal_linf_perturbation, worst_case_hinge};
use robust_dataset::{RngStream, Tensor};

fn hinge(w: &[f64], x: &[f64], y: i32) -> f64 {
    (1.0 - y as f64 * w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).max(0.0)
}

fn pair(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (prop::collection::vec(-3.0..3.0f64, n), prop::collection::vec(-3.0..3.0f64, n))
}

fn label() -> impl Strategy<Value = i32> {
    prop_oneof![Just(-1), Just(1)]
}

fn labelled(n: usize) -> impl Strategy<Value = (Vec<i32>, Vec<f64>)> {
    (prop::collection::vec(label(), n), prop::collection::vec(-2.0..2.0f64, n * 3))
}

fn shuffled(v: &Value, rng: &mut RngStream) -> Value {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<_> = m.keys().cloned().collect();
            rng.shuffle(&mut keys);
            let mut out = Map::new();
            for k in keys {
                out.insert(k.clone(), shuffled(&m[&k], rng));
            }
            Value::Object(out)
        }
        Value::Array(a) => Value::Array(a.iter().map(|x| shuffled(x, rng)).collect()),
        other => other.clone(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn hinge_objective_is_convex_in_weights(
        (w1, w2) in pair(3),
        (labels, xs) in labelled(6),
        t in 0.0..1.0f64,
        lambda in 0.0..0.1f64,
    ) {
        let ds = Dataset::new(Tensor::matrix(6, 3, xs).unwrap(), labels, None).unwrap();
        let f = |w: &[f64]| hinge_objective(&Model::linear(w.to_vec()).unwrap(), &ds, lambda).unwrap();
        let mid: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| t * a + (1.0 - t) * b).collect();
        prop_assert!(f(&mid) <= t * f(&w1) + (1.0 - t) * f(&w2) + 1e-9);
    }

    #[test]
    fn worst_case_hinge_dominates_the_ball(
        (w, x) in pair(4),
        y in label(),
        eps in 0.0..1.0f64,
        u in prop::collection::vec(-1.0..1.0f64, 4),
    ) {
        let worst = worst_case_hinge(&w, &x, y, eps);
        let probe: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + eps * b).collect();
        prop_assert!(hinge(&w, &probe, y) <= worst + 1e-9);
        prop_assert!((corner_max_hinge(&w, &x, y, eps).unwrap() - worst).abs() <= 1e-9);
        let delta = optimal_linf_perturbation(&w, y, eps).unwrap();
        prop_assert!(delta.iter().all(|d| d.abs() <= eps + 1e-12));
        let adv: Vec<f64> = x.iter().zip(&delta).map(|(a, b)| a + b).collect();
        prop_assert!((hinge(&w, &adv, y) - worst).abs() <= 1e-9);
    }

    #[test]
    fn projection_is_feasible_and_idempotent(
        (x, c) in pair(5),
        eps in 0.01..2.0f64,
        l2 in any::<bool>(),
        clip in any::<bool>(),
    ) {
        let cfg = if l2 { AttackConfig::l2(eps) } else { AttackConfig::linf(eps) };
        let range = ValueRange::new(-3.0, 3.0).unwrap();
        let cfg = cfg.with_range(clip.then_some(range));
        let x = Tensor::vector(x).unwrap();
        let c = Tensor::vector(c).unwrap();
        let p = project_to_ball(&x, &c, &cfg).unwrap();
        let diff: Vec<f64> = p.data().iter().zip(c.data()).map(|(a, b)| a - b).collect();
        let norm = if l2 {
            diff.iter().map(|d| d * d).sum::<f64>().sqrt()
        } else {
            diff.iter().fold(0.0f64, |m, d| m.max(d.abs()))
        };
        prop_assert!(norm <= eps + 1e-9);
        if clip {
            prop_assert!(p.data().iter().all(|&v| range.contains(v)));
        }
        let again = project_to_ball(&p, &c, &cfg).unwrap();
        for (a, b) in again.data().iter().zip(p.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn subsample_preserves_class_fractions(
        labels in prop::collection::vec(label(), 10..200),
        fraction in 0.05..1.0f64,
        seed in any::<u64>(),
    ) {
        let n = labels.len();
        let ds = Dataset::new(Tensor::matrix(n, 1, (0..n).map(|i| i as f64).collect()).unwrap(), labels, None).unwrap();
        let part = subsample(&ds, fraction, &mut RngStream::new(seed)).unwrap();
        let target = (fraction * n as f64).round() as usize;
        prop_assert!(part.len().abs_diff(target) <= 1);
        let full = ds.class_counts();
        let got = part.class_counts();
        for (k, &c) in &full {
            let share = c as f64 * part.len() as f64 / n as f64;
            prop_assert!((*got.get(k).unwrap_or(&0) as f64 - share).abs() <= 1.0 + 1e-9);
        }
        let rows = part.features().data();
        prop_assert!(rows.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn config_hash_ignores_key_order(seed in any::<u64>(), eps in 0.0..1.0f64) {
        let doc = json!({
            "seed": seed,
            "attack": { "epsilon": eps, "steps": 10, "norm": "linf" },
            "eval": { "seeds": [0, 1, 2], "architectures": [{ "hidden": [32, 32] }] },
        });
        let permuted = shuffled(&doc, &mut RngStream::new(seed));
        prop_assert_eq!(config_hash(&doc), config_hash(&permuted));
        let mut changed = doc.clone();
        changed["attack"]["steps"] = json!(11);
        prop_assert_ne!(config_hash(&doc), config_hash(&changed));
    }
}
