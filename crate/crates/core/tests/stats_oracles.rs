mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tersim_core::stats::special::student_t_two_sided;
use tersim_core::stats::{
    abs_diff_buckets, cohen_kappa, median, paired_t_test, pearson_r, relative_errors, weighted_kappa, KappaWeights,
    MeasurementPair, DEFAULT_CUTS,
};

fn pairs(xs: &[f64], ys: &[f64]) -> Vec<MeasurementPair> {
    xs.iter().zip(ys).map(|(&b, &r)| MeasurementPair::new(b, r)).collect()
}

fn random_pairs(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.015..0.08)).collect();
    let ys = xs.iter().map(|x| x + rng.gen_range(-0.004..0.004)).collect();
    (xs, ys)
}

#[test]
fn pearson_matches_two_pass_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for n in 3..60 {
        let (xs, ys) = random_pairs(&mut rng, n);
        let got = pearson_r(&pairs(&xs, &ys)).unwrap().r;
        assert!((got - common::pearson(&xs, &ys)).abs() < 1e-12, "n = {n}");
    }
}

#[test]
fn kappa_matches_exact_rationals() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let t: Vec<Vec<i64>> = (0..3).map(|_| (0..3).map(|_| rng.gen_range(0..30)).collect()).collect();
        let f: Vec<Vec<f64>> = t.iter().map(|r| r.iter().map(|&c| c as f64).collect()).collect();
        let (Ok(simple), Ok(linear)) = (cohen_kappa(&f), weighted_kappa(&f, KappaWeights::Linear)) else {
            continue;
        };
        assert!((simple.kappa - common::kappa_exact(&t).to_f64()).abs() < 1e-12);
        assert!((linear.kappa - common::linear_kappa_exact(&t).to_f64()).abs() < 1e-12);
        assert!((simple.se - common::kappa_se(&t)).abs() < 1e-12, "{t:?}");
    }
}

#[test]
fn unweighted_is_the_simple_kappa() {
    let t = vec![vec![14.0, 0.0, 0.0], vec![2.0, 8.0, 1.0], vec![0.0, 4.0, 24.0]];
    let a = cohen_kappa(&t).unwrap();
    let b = weighted_kappa(&t, KappaWeights::Unweighted).unwrap();
    assert_eq!(a, b);
}

#[test]
fn median_and_relative_errors_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for n in 1..40 {
        let (xs, ys) = random_pairs(&mut rng, n);
        let e = relative_errors(&pairs(&xs, &ys)).unwrap();
        for ((x, y), got) in xs.iter().zip(&ys).zip(&e.errors) {
            assert!((got - (y - x) / x).abs() < 1e-12);
        }
        assert!((e.median - common::median(&e.errors)).abs() < 1e-15);
        assert_eq!(median(&e.errors), Some(e.median));
    }
}

#[test]
fn buckets_match_integer_micrometres() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut bed = Vec::new();
    let mut rem = Vec::new();
    let mut want = [0usize; 3];
    for _ in 0..500 {
        let base_um: i64 = rng.gen_range(15_000..80_000);
        let d_um: i64 = rng.gen_range(-15_000..15_000);
        bed.push(base_um as f64 / 1e6);
        rem.push((base_um + d_um) as f64 / 1e6);
        want[common::bucket_um(d_um.abs())] += 1;
    }
    let b = abs_diff_buckets(&pairs(&bed, &rem), DEFAULT_CUTS);
    assert_eq!(b.counts, want);
    assert!((b.percent.iter().sum::<f64>() - 100.0).abs() < 1e-9);
}

#[test]
fn paired_t_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for n in 2..40 {
        let (xs, ys) = random_pairs(&mut rng, n);
        let t = paired_t_test(&pairs(&xs, &ys)).unwrap();
        let d: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| y - x).collect();
        let want = common::paired_t(&d);
        assert!((t.t - want).abs() <= 1e-9 * want.abs().max(1.0), "{} vs {want}", t.t);
        assert_eq!(t.n, n);
    }
}

#[test]
fn t_tail_matches_quadrature() {
    for df in [1u32, 2, 3, 5, 8, 13, 30, 57, 100, 200] {
        for t in [0.0, 0.1, 0.7, 1.5, 2.0, 3.3, 6.0, 12.0] {
            let got = student_t_two_sided(t, f64::from(df));
            let want = common::t_two_sided_quadrature(t, f64::from(df));
            assert!((got - want).abs() < 1e-9, "df {df} t {t}: {got} vs {want}");
        }
    }
}
