use facedyn_autograd::check::{check_gradients, GradCheckOptions};
use facedyn_autograd::Graph;
use facedyn_core::objectives::{
    cosine_logits, cross_entropy, focal_loss, smoothed_ce, supcon_loss, ClassifierHead,
    FocalConfig, MemoryQueue, SupConConfig,
};
use facedyn_core::Error;
use ndarray::{arr2, Array2, ArrayD, IxDyn};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(tau: f64) -> SupConConfig {
    SupConConfig {
        temperature: tau,
        queue_capacity: 64,
    }
}

fn supcon_value(z: &Array2<f64>, labels: &[usize], queue: &mut MemoryQueue, tau: f64) -> f64 {
    let g = Graph::<f64>::new();
    let v = g.constant(z.clone().into_dyn());
    supcon_loss(v, labels, queue, &cfg(tau))
        .unwrap()
        .loss
        .item()
}

/// Direct evaluation of the per-anchor sum, averaged over anchors with positives.
fn oracle(z: &[Vec<f64>], labels: &[usize], queue: &[(Vec<f64>, usize)], tau: f64) -> f64 {
    let mut pool: Vec<(&[f64], usize)> = z
        .iter()
        .map(Vec::as_slice)
        .zip(labels.iter().copied())
        .collect();
    pool.extend(queue.iter().map(|(v, y)| (v.as_slice(), *y)));
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..z.len() {
        let mut denom = 0.0;
        for (a, item) in pool.iter().enumerate() {
            if a != i {
                denom += (dot(&z[i], item.0) / tau).exp();
            }
        }
        let mut sum = 0.0;
        let mut count = 0;
        for (p, item) in pool.iter().enumerate() {
            if p != i && item.1 == labels[i] {
                sum += ((dot(&z[i], item.0) / tau).exp() / denom).ln();
                count += 1;
            }
        }
        if count > 0 {
            total += -sum / count as f64;
            anchors += 1;
        }
    }
    if anchors == 0 {
        0.0
    } else {
        total / anchors as f64
    }
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn to_array(rows: &[Vec<f64>]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), rows[0].len()), |(i, j)| rows[i][j])
}

#[test]
fn supcon_identical_pair_is_zero() {
    let z = arr2(&[[0.6, 0.8], [0.6, 0.8]]);
    for tau in [0.07, 1.0, 3.0] {
        let v = supcon_value(&z, &[4, 4], &mut MemoryQueue::new(0), tau);
        assert!(v.abs() < 1e-12, "{v}");
    }
}

#[test]
fn supcon_hand_cases() {
    let z = arr2(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
    let labels = [0, 0, 1];
    // anchors 1 and 2 are symmetric; anchor 3 has no positive
    let at_one = supcon_value(&z, &labels, &mut MemoryQueue::new(0), 1.0);
    assert!((at_one - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
    assert!((at_one - 0.31326).abs() < 1e-5);
    let cold = supcon_value(&z, &labels, &mut MemoryQueue::new(0), 0.07);
    assert!((cold - 6.2e-7).abs() < 0.05e-7, "{cold}");
}

#[test]
fn supcon_matches_oracle_on_random_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for trial in 0..150 {
        let b = rng.random_range(2..12);
        let d = rng.random_range(2..9);
        let tau = [0.07, 0.1, 0.5, 1.0][trial % 4];
        let z = unit_rows(&mut rng, b, d);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..4)).collect();
        let mut queue = MemoryQueue::new(32);
        let mut queued = Vec::new();
        if trial % 2 == 1 {
            let m = rng.random_range(1..20);
            let q = unit_rows(&mut rng, m, d);
            let ql: Vec<usize> = (0..m).map(|_| rng.random_range(0..4)).collect();
            queue.push(&to_array(&q), &ql);
            queued = q.into_iter().zip(ql).collect();
        }
        let got = supcon_value(&to_array(&z), &labels, &mut queue, tau);
        let want = oracle(&z, &labels, &queued, tau);
        worst = worst.max((got - want).abs());
    }
    assert!(worst <= 1e-6, "worst gap {worst}");
}

#[test]
fn supcon_is_rotation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = to_array(&unit_rows(&mut rng, 8, 3));
    let labels = [0, 1, 0, 1, 2, 2, 0, 1];
    let (c, s) = (0.3f64.cos(), 0.3f64.sin());
    let rot = arr2(&[[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]);
    let rot2 = arr2(&[[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]]);
    let zr = z.dot(&rot).dot(&rot2);
    let a = supcon_value(&z, &labels, &mut MemoryQueue::new(0), 0.1);
    let b = supcon_value(&zr, &labels, &mut MemoryQueue::new(0), 0.1);
    assert!((a - b).abs() < 1e-10);
}

#[test]
fn supcon_flags_missing_positives_and_bad_norms() {
    let g = Graph::<f64>::new();
    let z = g.constant(arr2(&[[1.0, 0.0], [0.0, 1.0]]).into_dyn());
    let out = supcon_loss(z, &[0, 1], &mut MemoryQueue::new(0), &cfg(0.1)).unwrap();
    assert!(out.no_positives);
    assert_eq!(out.loss.item(), 0.0);
    let bad = g.constant(arr2(&[[2.0, 0.0], [0.0, 1.0]]).into_dyn());
    assert!(matches!(
        supcon_loss(bad, &[0, 0], &mut MemoryQueue::new(0), &cfg(0.1)),
        Err(Error::Contract(_))
    ));
}

#[test]
fn supcon_enqueues_after_the_loss() {
    let mut queue = MemoryQueue::new(3);
    let z = arr2(&[[1.0, 0.0], [1.0, 0.0]]);
    // the first call sees an empty queue, so only the in-batch positive counts
    let first = supcon_value(&z, &[0, 0], &mut queue, 1.0);
    assert!(first.abs() < 1e-12);
    assert_eq!(queue.len(), 2);
    let second = supcon_value(&arr2(&[[0.0, 1.0], [1.0, 0.0]]), &[1, 0], &mut queue, 1.0);
    let want = oracle(
        &[vec![0.0, 1.0], vec![1.0, 0.0]],
        &[1, 0],
        &[(vec![1.0, 0.0], 0), (vec![1.0, 0.0], 0)],
        1.0,
    );
    assert!((second - want).abs() < 1e-12);
    assert_eq!(queue.labels(), vec![0, 1, 0]);
}

proptest! {
    #[test]
    fn queue_keeps_the_most_recent_items(cap in 0usize..20, pushes in 1usize..8, b in 1usize..6) {
        let mut q = MemoryQueue::new(cap);
        let mut all = Vec::new();
        for n in 0..pushes {
            let labels: Vec<usize> = (0..b).map(|i| n * b + i).collect();
            let rows = Array2::from_shape_fn((b, 2), |(i, _)| (n * b + i) as f64);
            q.push(&rows, &labels);
            all.extend(labels);
        }
        let keep = (pushes * b).min(cap);
        prop_assert_eq!(q.len(), keep);
        prop_assert_eq!(q.labels(), all[all.len() - keep..].to_vec());
        if let Some(e) = q.embeddings() {
            let firsts: Vec<usize> = e.column(0).iter().map(|&v| v as usize).collect();
            prop_assert_eq!(firsts, q.labels());
        }
    }
}

fn logits_var<'g>(g: &'g Graph<f64>, rows: &[&[f64]]) -> facedyn_autograd::Var<'g, f64> {
    let c = rows[0].len();
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    g.constant(ArrayD::from_shape_vec(IxDyn(&[rows.len(), c]), flat).unwrap())
}

#[test]
fn focal_hand_case_and_reduction() {
    let g = Graph::<f64>::new();
    let l = logits_var(&g, &[&[0.0, 0.0]]);
    let f = focal_loss(l, &[0], &FocalConfig::default()).unwrap().item();
    assert!((f - 0.25 * 2f64.ln()).abs() < 1e-12);
    assert!((f - 0.17329).abs() < 1e-5);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let b = rng.random_range(1..6);
        let c = rng.random_range(2..7);
        let vals = ArrayD::from_shape_simple_fn(IxDyn(&[b, c]), || rng.random_range(-4.0..4.0));
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let x = g.constant(vals.clone());
        let fl = focal_loss(
            x,
            &labels,
            &FocalConfig {
                gamma: 0.0,
                class_weights: None,
            },
        )
        .unwrap();
        let ce = cross_entropy(x, &labels).unwrap();
        // explicit cross-entropy
        let mut want = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row: Vec<f64> = (0..c).map(|j| vals[[i, j]]).collect();
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            want += lse - row[y];
        }
        want /= b as f64;
        assert!((fl.item() - ce.item()).abs() <= 1e-8);
        assert!((ce.item() - want).abs() <= 1e-8);
    }
}

#[test]
fn focal_decreases_as_the_true_class_gains() {
    let g = Graph::<f64>::new();
    let mut prev = f64::INFINITY;
    for step in 0..40 {
        let m = -6.0 + step as f64 * 0.4;
        let l = logits_var(&g, &[&[m, 0.0, 0.5]]);
        let v = focal_loss(l, &[0], &FocalConfig::default()).unwrap().item();
        assert!(v <= prev);
        prev = v;
    }
    let sure = logits_var(&g, &[&[60.0, 0.0]]);
    assert!(
        focal_loss(sure, &[0], &FocalConfig::default())
            .unwrap()
            .item()
            < 1e-20
    );
}

#[test]
fn smoothed_ce_hand_cases() {
    let g = Graph::<f64>::new();
    for alpha in [0.0, 0.1, 0.5, 0.9] {
        let flat = smoothed_ce(logits_var(&g, &[&[0.0, 0.0]]), &[1], alpha)
            .unwrap()
            .item();
        assert!((flat - 2f64.ln()).abs() < 1e-12);
    }
    let v = smoothed_ce(logits_var(&g, &[&[1.0, 0.0]]), &[0], 0.1)
        .unwrap()
        .item();
    let p0 = 1f64.exp() / (1f64.exp() + 1.0);
    assert!((v + 0.95 * p0.ln() + 0.05 * (1.0 - p0).ln()).abs() < 1e-12);
    assert!((v - 0.36326).abs() < 1e-5);
    assert!(matches!(
        smoothed_ce(logits_var(&g, &[&[1.0, 0.0]]), &[0], 1.0),
        Err(Error::Config(_))
    ));
}

#[test]
fn cosine_logits_hand_cases() {
    let g = Graph::<f64>::new();
    let w = g.constant(arr2(&[[2.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 0.5]]).into_dyn());
    let z = g.constant(arr2(&[[0.7, 0.0, 0.0]]).into_dyn());
    let l = cosine_logits(z, w, 16.0).unwrap();
    assert_eq!(l.value().as_slice().unwrap(), &[16.0, 0.0, 0.0]);

    let head = ClassifierHead::new(5, 4, 1);
    let e = Array2::from_shape_fn((3, 4), |(i, j)| (i as f32 - j as f32) * 0.3 + 0.1);
    let a = head.logits(&e).unwrap();
    let b = head.logits(&(&e * 10.0)).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-6));
    assert!(a.iter().all(|v| v.abs() <= 16.0 + 1e-5));
    assert_eq!(
        head.predict(&e).unwrap(),
        head.predict(&(&e * 10.0)).unwrap()
    );

    let zero = g.constant(arr2(&[[0.0, 0.0, 0.0]]).into_dyn());
    assert!(matches!(
        cosine_logits(zero, w, 16.0),
        Err(Error::NumericGuard(_))
    ));
    assert!(matches!(
        head.logits(&Array2::zeros((1, 4))),
        Err(Error::NumericGuard(_))
    ));
}

fn random(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
}

fn assert_grad<F>(inputs: &[ArrayD<f64>], build: F)
where
    F: for<'g> Fn(
        &'g Graph<f64>,
        &[facedyn_autograd::Var<'g, f64>],
    ) -> facedyn_autograd::Var<'g, f64>,
{
    let r = check_gradients(inputs, build, &GradCheckOptions::default());
    assert!(r.checked > 0 && r.max_rel_error <= 1e-4, "{r:?}");
}

#[test]
fn loss_gradients_match_finite_differences() {
    let labels = [0, 1, 0, 2, 1, 0];
    let queued = {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        to_array(&unit_rows(&mut rng, 5, 4))
    };
    for with_queue in [false, true] {
        let q = queued.clone();
        assert_grad(&[random(&[6, 4], 1)], move |_, v| {
            let mut queue = MemoryQueue::new(16);
            if with_queue {
                queue.push(&q, &[0, 1, 2, 2, 1]);
            }
            let z = v[0].l2_normalize(1e-12);
            supcon_loss(z, &labels, &mut queue, &cfg(0.2)).unwrap().loss
        });
    }
    let logits = random(&[6, 3], 2).mapv(|v| 3.0 * v);
    assert_grad(&[logits.clone()], |_, v| {
        focal_loss(v[0], &labels, &FocalConfig::default()).unwrap()
    });
    assert_grad(&[logits.clone()], |_, v| {
        let cfg = FocalConfig {
            gamma: 1.5,
            class_weights: Some(vec![1.0, 2.0, 0.5]),
        };
        focal_loss(v[0], &labels, &cfg).unwrap()
    });
    assert_grad(&[logits], |_, v| smoothed_ce(v[0], &labels, 0.1).unwrap());
    assert_grad(&[random(&[6, 4], 3), random(&[3, 4], 4)], |_, v| {
        smoothed_ce(cosine_logits(v[0], v[1], 16.0).unwrap(), &labels, 0.1).unwrap()
    });
}
