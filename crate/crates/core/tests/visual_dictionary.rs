use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vislang::dictionary::{
    accumulate, assign, embed, init_codebook, momentum_update, utilization, Assignment, Codebook,
};
use vislang::gradcheck::{finite_diff_check_surrogate, GradCheckConfig};
use vislang::{Graph, Tensor};

fn brute_force(features: &Tensor, entries: &Tensor) -> Vec<usize> {
    (0..features.rows())
        .map(|i| {
            let v = features.row(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for j in 0..entries.rows() {
                let d: f64 = v
                    .iter()
                    .zip(entries.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best_d {
                    best = j;
                    best_d = d;
                }
            }
            best
        })
        .collect()
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Tensor, Codebook) {
    let l = rng.gen_range(1..=256);
    let k = rng.gen_range(2..=512);
    let c = rng.gen_range(1..=64);
    let mut entries: Vec<f64> = (0..k * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    // duplicate a few entries so exact ties occur
    for _ in 0..3 {
        let (a, b) = (rng.gen_range(0..k), rng.gen_range(0..k));
        let row: Vec<f64> = entries[a * c..(a + 1) * c].to_vec();
        entries[b * c..(b + 1) * c].copy_from_slice(&row);
    }
    let mut feats: Vec<f64> = (0..l * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    // some features sit exactly on entries
    for i in 0..l / 4 {
        let j = rng.gen_range(0..k);
        feats[i * c..(i + 1) * c].copy_from_slice(&entries[j * c..(j + 1) * c]);
    }
    let book = Codebook::new(Tensor::new(&[k, c], entries).unwrap(), vec![0; k], 0.9).unwrap();
    (Tensor::new(&[l, c], feats).unwrap(), book)
}

#[test]
fn assign_matches_brute_force_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let (feats, book) = random_instance(&mut rng);
        let a = assign(&feats, &book).unwrap();
        assert_eq!(a.indices, brute_force(&feats, book.entries()));
    }
}

#[test]
fn assign_breaks_equidistant_ties_low() {
    let book = Codebook::new(
        Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]]).unwrap(),
        vec![0; 4],
        0.5,
    )
    .unwrap();
    let v = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.5]]).unwrap();
    assert_eq!(assign(&v, &book).unwrap().indices, vec![0, 2]);
}

#[test]
fn quantization_is_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let book = init_codebook(64, 8, 0.9, 11).unwrap();
    let feats = Tensor::new(&[100, 8], (0..800).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
    let a = assign(&feats, &book).unwrap();
    let mut g = Graph::new();
    let v = g.constant(feats);
    let e = book.bind(&mut g, false);
    let q = embed(&mut g, v, &a, e).unwrap();
    let again = assign(g.value(q), &book).unwrap();
    assert_eq!(a.indices, again.indices);
}

#[test]
fn embed_forward_and_gradient_contract() {
    let book = init_codebook(6, 4, 0.9, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let feats = Tensor::new(&[5, 4], (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let a = assign(&feats, &book).unwrap();
    let mut g = Graph::new();
    let v = g.param(feats);
    let e = book.bind(&mut g, true);
    let q = embed(&mut g, v, &a, e).unwrap();
    for (i, &j) in a.indices.iter().enumerate() {
        assert_eq!(g.value(q).row(i), book.entry(j));
    }
    let s = g.sum(q);
    g.backward(s).unwrap();
    assert!(g.grad(v).unwrap().data().iter().all(|&x| x == 1.0));
    assert_eq!(g.grad(e).map(|t| t.max_abs()).unwrap_or(0.0), 0.0);

    let short = Assignment::from_indices(vec![0; 4]);
    let mut g = Graph::new();
    let v = g.param(Tensor::zeros(&[5, 4]));
    let e = book.bind(&mut g, false);
    assert!(matches!(embed(&mut g, v, &short, e), Err(vislang::Error::Contract(_))));
}

#[test]
fn embed_composite_loss_matches_frozen_surrogate() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..5 {
        let book = init_codebook(8, 3, 0.9, rng.gen()).unwrap();
        let feats = Tensor::new(&[6, 3], (0..18).map(|_| rng.gen_range(-0.6..0.6)).collect()).unwrap();
        let target = Tensor::new(&[6, 3], (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let a = assign(&feats, &book).unwrap();
        let offset: Vec<f64> = (0..18)
            .map(|i| book.entry(a.indices[i / 3])[i % 3] - feats.data()[i])
            .collect();
        let offset = Tensor::new(&[6, 3], offset).unwrap();
        let cfg = GradCheckConfig {
            tol: 1e-6,
            ..Default::default()
        };
        let loss = |g: &mut Graph, q| {
            let t = g.constant(target.clone());
            let d = g.sub(q, t)?;
            let sq = g.mul(d, d)?;
            Ok(g.sum(sq))
        };
        let r = finite_diff_check_surrogate(
            |g, v| {
                let e = book.bind(g, false);
                let q = embed(g, v, &a, e)?;
                loss(g, q)
            },
            |g, v| {
                let off = g.constant(offset.clone());
                let q = g.add(v, off)?;
                loss(g, q)
            },
            &feats,
            &cfg,
        )
        .unwrap();
        assert!(r.passed, "rel err {}", r.max_rel_err);
    }
}

fn closed_form(book: &Codebook, feats: &Tensor, indices: &[usize]) -> Vec<Vec<f64>> {
    (0..book.k())
        .map(|j| {
            let members: Vec<usize> = (0..indices.len()).filter(|&i| indices[i] == j).collect();
            if members.is_empty() {
                return book.entry(j).to_vec();
            }
            (0..book.c())
                .map(|ch| {
                    let mean = members.iter().map(|&i| feats.row(i)[ch]).sum::<f64>() / members.len() as f64;
                    book.gamma() * book.entry(j)[ch] + (1.0 - book.gamma()) * mean
                })
                .collect()
        })
        .collect()
}

#[test]
fn momentum_update_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for trial in 0..50 {
        let k = rng.gen_range(2..40);
        let c = rng.gen_range(1..16);
        let l = rng.gen_range(1..60);
        let gamma = match trial % 5 {
            0 => 0.0,
            1 => 1.0,
            _ => rng.gen_range(0.0..1.0),
        };
        let mut book = init_codebook(k, c, gamma, rng.gen()).unwrap();
        let feats = Tensor::new(&[l, c], (0..l * c).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let a = assign(&feats, &book).unwrap();
        let want = closed_form(&book, &feats, &a.indices);
        let before = book.clone();
        momentum_update(&mut book, &feats, &a).unwrap();
        for j in 0..k {
            let used = a.inverse.contains_key(&j);
            for ch in 0..c {
                let got = book.entry(j)[ch];
                if !used || gamma == 1.0 {
                    assert_eq!(got.to_bits(), before.entry(j)[ch].to_bits());
                } else {
                    assert!((got - want[j][ch]).abs() <= 1e-12, "{got} vs {}", want[j][ch]);
                }
            }
            let grew = book.counts()[j] - before.counts()[j];
            assert_eq!(grew as usize, a.inverse.get(&j).map_or(0, Vec::len));
        }
        if gamma == 0.0 {
            for (&j, members) in &a.inverse {
                let mean: Vec<f64> = (0..c)
                    .map(|ch| members.iter().map(|&i| feats.row(i)[ch]).sum::<f64>() / members.len() as f64)
                    .collect();
                assert_eq!(book.entry(j), &mean[..]);
            }
        }
    }
}

#[test]
fn momentum_update_contracts_towards_group_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..20 {
        let gamma = rng.gen_range(0.0..1.0);
        let mut book = init_codebook(10, 5, gamma, rng.gen()).unwrap();
        let feats = Tensor::new(&[30, 5], (0..150).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let a = assign(&feats, &book).unwrap();
        let before = book.clone();
        momentum_update(&mut book, &feats, &a).unwrap();
        for (&j, members) in &a.inverse {
            let mean: Vec<f64> = (0..5)
                .map(|ch| members.iter().map(|&i| feats.row(i)[ch]).sum::<f64>() / members.len() as f64)
                .collect();
            let dist = |d: &[f64]| d.iter().zip(&mean).map(|(x, m)| (x - m).powi(2)).sum::<f64>().sqrt();
            let after = dist(book.entry(j));
            let was = dist(before.entry(j));
            assert!((after - gamma * was).abs() <= 1e-12 * (1.0 + was), "{after} vs {}", gamma * was);
        }
    }
}

#[test]
fn unused_entries_stay_bitwise_fixed_over_many_updates() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let init = init_codebook(32, 4, 0.9, 8).unwrap();
    let mut book = init.clone();
    let mut ever = vec![false; 32];
    for _ in 0..20 {
        // features concentrated in a corner so many entries are never chosen
        let feats = Tensor::new(&[16, 4], (0..64).map(|_| rng.gen_range(0.3..0.5)).collect()).unwrap();
        let a = assign(&feats, &book).unwrap();
        for &j in &a.indices {
            ever[j] = true;
        }
        momentum_update(&mut book, &feats, &a).unwrap();
    }
    assert!(ever.iter().any(|&u| !u));
    for j in (0..32).filter(|&j| !ever[j]) {
        assert_eq!(book.entry(j), init.entry(j));
        assert_eq!(book.counts()[j], 0);
    }
}

#[test]
fn init_matches_its_distribution() {
    let (k, c) = (4096, 64);
    let book = init_codebook(k, c, 0.99, 123).unwrap();
    let n = (k * c) as f64;
    let bound = 1.0 / (c as f64).sqrt();
    let mean = book.entries().data().iter().sum::<f64>() / n;
    let sigma = bound / 3f64.sqrt() / n.sqrt();
    assert!(mean.abs() < 3.0 * sigma, "mean {mean}, 3 sigma {}", 3.0 * sigma);
    assert!(book.entries().max_abs() <= bound);
}

#[test]
fn random_features_use_most_of_a_random_book() {
    let (k, c, l) = (128, 16, 10_000);
    let book = init_codebook(k, c, 0.99, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let bound = 1.0 / (c as f64).sqrt();
    let feats = Tensor::new(&[l, c], (0..l * c).map(|_| rng.gen_range(-bound..bound)).collect()).unwrap();
    let a = assign(&feats, &book).unwrap();
    let mut hist = vec![0; k];
    accumulate(&mut hist, &a);
    let r = utilization(&hist).unwrap();
    assert!(r.fraction > 0.9, "utilization {}", r.fraction);
    assert_eq!(r.histogram.iter().sum::<u64>(), l as u64);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn inverse_map_is_a_partition(indices in prop::collection::vec(0usize..20, 1..100)) {
        let a = Assignment::from_indices(indices.clone());
        let total: usize = a.inverse.values().map(Vec::len).sum();
        prop_assert_eq!(total, indices.len());
        for (&j, members) in &a.inverse {
            for &i in members {
                prop_assert_eq!(indices[i], j);
            }
        }
    }

    #[test]
    fn counts_never_decrease(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut book = init_codebook(12, 3, 0.8, seed).unwrap();
        let mut prev = book.counts().to_vec();
        for _ in 0..4 {
            let feats = Tensor::new(&[10, 3], (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let a = assign(&feats, &book).unwrap();
            momentum_update(&mut book, &feats, &a).unwrap();
            prop_assert!(book.counts().iter().zip(&prev).all(|(n, p)| n >= p));
            prop_assert!(book.entries().all_finite());
            prev = book.counts().to_vec();
        }
    }
}
