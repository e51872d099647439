mod common;

use icon::autodiff::value_and_grad;
use icon::numerics::{Matrix, RngStream};
use icon::objectives::{
    forgetting, init_head, kl_gauss, nce_loss, normalize_embeddings, tape_mean_nll, ModelBank,
};
use proptest::prelude::*;

#[test]
fn gradient_of_a_sum_is_the_sum_of_gradients() {
    let f = common::randomized_flow(4, 2, 3, 8, 1, 0.2);
    let mut rng = RngStream::new(1, 1);
    let (a, b) = (rng.normal_matrix(20, 4), rng.normal_matrix(30, 4));
    let grad = |xs: &[&Matrix]| {
        value_and_grad(&f.params, |t, s| {
            let mut acc = tape_mean_nll(&f.arch, t, s, &f.params, xs[0])?;
            for x in &xs[1..] {
                let v = tape_mean_nll(&f.arch, t, s, &f.params, x)?;
                acc = t.add(acc, v)?;
            }
            Ok(acc)
        })
        .unwrap()
        .grad
    };
    let (ga, gb, gab) = (grad(&[&a]), grad(&[&b]), grad(&[&a, &b]));
    for i in 0..gab.len() {
        assert!((gab[i] - ga[i] - gb[i]).abs() < 1e-10);
    }
}

#[test]
fn forgetting_flips_sign_when_roles_swap() {
    let (p, q) = (
        common::randomized_flow(3, 3, 2, 6, 2, 0.3),
        common::randomized_flow(3, 3, 2, 6, 3, 0.3),
    );
    let data = common::gaussian_tasks(3, 50, 3, 4);
    let bank = |ata: &icon::flow::FlowParams, pta: &icon::flow::FlowParams| {
        let mut b = ModelBank::new(ata.clone());
        b.pta = vec![pta.clone(); 3];
        b
    };
    let f1 = forgetting(&bank(&p, &q), &data).unwrap();
    let f2 = forgetting(&bank(&q, &p), &data).unwrap();
    assert!(f1.abs() > 1e-3);
    assert!((f1 + f2).abs() < 1e-12);
}

fn gaussian(rng: &mut RngStream, n: usize) -> (Vec<f64>, Vec<f64>) {
    ((0..n).map(|_| rng.normal()).collect(), (0..n).map(|_| rng.uniform(0.2, 3.0)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_non_negative_and_zero_only_for_equal_parameters(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = RngStream::new(seed, 0);
        let (mp, sp) = gaussian(&mut rng, n);
        let (mq, sq) = gaussian(&mut rng, n);
        prop_assert!(kl_gauss(&mp, &sp, &mq, &sq).unwrap() > 0.0);
        prop_assert!(kl_gauss(&mp, &sp, &mp, &sp).unwrap().abs() < 1e-12);
    }

    #[test]
    fn raising_the_true_class_similarity_lowers_the_loss(seed in 0u64..10_000, step in 0.05f64..1.0) {
        let mut rng = RngStream::new(seed, 1);
        let head = init_head(3, 6, &mut rng).unwrap();
        let z = rng.normal_matrix(1, 3);
        let emb = normalize_embeddings(&rng.normal_matrix(4, 6)).unwrap();
        let label = (seed % 4) as usize;
        let before = nce_loss(&z, &head, &[label], &emb, 0.5).unwrap();
        // Rotate the true class embedding toward the sample's projected
        // embedding; every other class is untouched.
        let e = normalize_embeddings(&icon::objectives::head_embed(&head, &z).unwrap()).unwrap();
        let own = emb.row(label).to_vec();
        let mut moved = emb.clone();
        let mixed: Vec<f64> = own.iter().zip(e.row(0)).map(|(a, b)| a + step * b).collect();
        let norm = mixed.iter().map(|v| v * v).sum::<f64>().sqrt();
        moved.row_mut(label).iter_mut().zip(&mixed).for_each(|(m, v)| *m = v / norm);
        let sim = |emb: &Matrix| emb.row(label).iter().zip(e.row(0)).map(|(a, b)| a * b).sum::<f64>();
        prop_assume!(sim(&moved) > sim(&emb) + 1e-9);
        let after = nce_loss(&z, &head, &[label], &moved, 0.5).unwrap();
        prop_assert!(after < before);
    }
}
