mod common;

use common::rng;
use winn::supervised::{classify, evaluate_attack, fgsm, fgsm_step, AttackReport, Classifier, NetClassifier};
use winn::{ArchitectureSpec, ModelParams, Preset, Result, Tensor};

fn net(seed: u64) -> (ArchitectureSpec, ModelParams) {
    let spec = Preset::SupervisedHead { classes: 4, input_size: 8 }.spec().unwrap();
    let params = common::perturbed_params(&spec, seed, 0.2);
    (spec, params)
}

#[test]
fn fgsm_contracts_on_random_cases() {
    let mut r = rng(1);
    for case in 0..10_000 {
        let n = 1 + case % 5;
        let x = Tensor::uniform(&[n, 3], -1.0, 1.0, &mut r);
        let mut g = Tensor::uniform(&[n, 3], -1.0, 1.0, &mut r);
        if case % 7 == 0 {
            g.data_mut()[0] = 0.0;
        }
        let eps = Tensor::uniform(&[1], 0.0, 0.5, &mut r).item();
        assert_eq!(fgsm_step(&x, &g, 0.0).unwrap(), x);
        let adv = fgsm_step(&x, &g, eps).unwrap();
        let pre = x.zip_map(&g, |a, b| a + eps * b.signum() * f64::from(u8::from(b != 0.0)));
        for ((a, p), o) in adv.data().iter().zip(pre.data()).zip(x.data()) {
            assert!((p - o).abs() <= eps + 1e-15);
            assert!((-1.0..=1.0).contains(a));
            assert_eq!(*a, p.clamp(-1.0, 1.0));
        }
    }
}

#[test]
fn fgsm_on_a_network() {
    let (spec, params) = net(2);
    let mut r = rng(3);
    let x = Tensor::uniform(&[6, 1, 8, 8], -1.0, 1.0, &mut r);
    let y = [0, 1, 2, 3, 0, 1];
    assert_eq!(fgsm(&spec, &params, &x, &y, 0.0).unwrap(), x);
    let adv = fgsm(&spec, &params, &x, &y, 0.125).unwrap();
    for (a, o) in adv.data().iter().zip(x.data()) {
        assert!((a - o).abs() <= 0.125 + 1e-15);
        assert!((-1.0..=1.0).contains(a));
    }
    assert!(fgsm(&spec, &params, &x, &[0, 1, 2, 3, 4, 0], 0.1).unwrap_err().is_usage());
}

#[test]
fn classify_ties_and_one_hot_logits() {
    let (spec, mut params) = net(4);
    for name in ["class_head.weight", "class_head.bias"] {
        let t = params.get_mut(name).unwrap();
        *t = Tensor::zeros(t.shape());
    }
    let x = Tensor::uniform(&[5, 1, 8, 8], -1.0, 1.0, &mut rng(5));
    assert_eq!(classify(&spec, &params, &x).unwrap().0, vec![0; 5]);
    for k in 0..4 {
        *params.get_mut("class_head.bias").unwrap() = Tensor::from_fn(&[4], |i| f64::from(u8::from(i == k)));
        assert_eq!(classify(&spec, &params, &x).unwrap().0, vec![k; 5]);
    }
}

#[test]
fn permuting_classes_permutes_predictions() {
    let (spec, params) = net(6);
    let x = Tensor::uniform(&[20, 1, 8, 8], -1.0, 1.0, &mut rng(7));
    let (pred, _) = classify(&spec, &params, &x).unwrap();
    let perm = [2, 0, 3, 1]; // new column j holds old class perm[j]
    let mut permuted = params.clone();
    let w = params.get("class_head.weight").unwrap();
    let f = w.shape()[0];
    *permuted.get_mut("class_head.weight").unwrap() = Tensor::from_fn(&[f, 4], |i| w.data()[(i / 4) * 4 + perm[i % 4]]);
    let b = params.get("class_head.bias").unwrap();
    *permuted.get_mut("class_head.bias").unwrap() = Tensor::from_fn(&[4], |j| b.data()[perm[j]]);
    let (pp, _) = classify(&spec, &permuted, &x).unwrap();
    for (a, b) in pred.iter().zip(pp) {
        assert_eq!(perm[b], *a);
    }
}

#[test]
fn classify_is_deterministic_and_batch_equivariant() {
    let (spec, params) = net(8);
    let x = Tensor::uniform(&[9, 1, 8, 8], -1.0, 1.0, &mut rng(9));
    let (p1, l1) = classify(&spec, &params, &x).unwrap();
    let (p2, l2) = classify(&spec, &params, &x).unwrap();
    assert_eq!((&p1, &l1), (&p2, &l2));
    let order = [4, 0, 8, 2, 6, 1, 3, 7, 5];
    let (pp, lp) = classify(&spec, &params, &x.gather(&order)).unwrap();
    for (k, &i) in order.iter().enumerate() {
        assert_eq!(pp[k], p1[i]);
        for (a, b) in lp.sample(k).iter().zip(l1.sample(i)) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

/// Knows the right answer for one fixed test set.
struct Oracle(Vec<usize>);

impl Classifier for Oracle {
    fn predict(&mut self, x: &Tensor) -> Result<Vec<usize>> {
        assert_eq!(x.batch(), self.0.len());
        Ok(self.0.clone())
    }
}

#[test]
fn attack_report_identities_and_extremes() {
    let (spec, params) = net(10);
    let mut r = rng(11);
    let x = Tensor::uniform(&[40, 1, 8, 8], -1.0, 1.0, &mut r);
    let y: Vec<usize> = (0..40).map(|i| i % 4).collect();
    let n = x.batch();

    let mut same = NetClassifier { spec: &spec, params: &params };
    let rep = evaluate_attack(&spec, &params, &mut same, &x, &y, 0.125, n).unwrap();
    assert!(rep.n_a > 0, "{rep}");
    assert_eq!(rep.n, 40);
    assert_eq!(rep.n_ab, rep.n_a);
    assert_eq!(rep.correction_rate(), Some(0.0));
    assert_eq!(rep.adversarial_error() * n as f64, rep.n_a as f64);

    let rep = evaluate_attack(&spec, &params, &mut Oracle(y.clone()), &x, &y, 0.125, n).unwrap();
    assert_eq!(rep.n_ab, 0);
    assert_eq!(rep.correction_rate(), Some(1.0));

    // Chunking does not change the counts.
    let mut same = NetClassifier { spec: &spec, params: &params };
    let chunked = evaluate_attack(&spec, &params, &mut same, &x, &y, 0.125, 7).unwrap();
    let mut same = NetClassifier { spec: &spec, params: &params };
    assert_eq!(chunked, evaluate_attack(&spec, &params, &mut same, &x, &y, 0.125, n).unwrap());

    let empty = Tensor::zeros(&[0, 1, 8, 8]);
    let err = evaluate_attack(&spec, &params, &mut Oracle(vec![]), &empty, &[], 0.1, 10).unwrap_err();
    assert!(err.is_usage());
}

#[test]
fn report_rows() {
    let r = AttackReport { n: 8, n_a: 4, n_ab: 1 };
    assert_eq!(r.csv_row(), "8,4,1,0.5,0.75");
    assert!(r.n_ab <= r.n_a && r.n_a <= r.n);
    assert_eq!(AttackReport { n: 8, n_a: 0, n_ab: 0 }.csv_row(), "8,0,0,0,");
}
