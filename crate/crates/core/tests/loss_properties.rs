use dura::evidence::DirichletParams;
use dura::losses::{
    loss_dsh, loss_kl, loss_m, loss_tal, loss_triplet, BatchLabels, DshSchedule, LossConfig,
};
use dura::numeric::{Mat64, Rng};
use proptest::prelude::*;
use rand_distr::{Distribution, Gamma};

fn sample_dirichlet(rng: &mut Rng, alpha: &[f64]) -> Vec<f64> {
    let draws: Vec<f64> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).unwrap().sample(rng))
        .collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|g| g / total).collect()
}

#[test]
fn loss_m_matches_monte_carlo() {
    let mut rng = Rng::new(404);
    let n = 40_000;
    for case in 0..50 {
        let k = [2, 3, 5, 10][case % 4];
        let alpha: Vec<f64> = (0..k).map(|_| rng.uniform_range(1.0, 4.0)).collect();
        let t = rng.below(k);
        let mut y = vec![0.0; k];
        y[t] = 1.0;

        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n {
            let p = sample_dirichlet(&mut rng, &alpha);
            let v: f64 = p.iter().zip(&y).map(|(pj, yj)| (yj - pj).powi(2)).sum();
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let se = ((sum_sq / n as f64 - mean * mean) / n as f64).sqrt();
        let (value, _) = loss_m(&DirichletParams::new(alpha.clone()).unwrap(), &y).unwrap();
        assert!((value - mean).abs() <= 3.0 * se, "case {case}: {value} vs {mean} ± {se}");
    }
}

fn labels_for(k: usize, ids: &[usize]) -> BatchLabels {
    BatchLabels::aligned(ids[..k].to_vec())
}

fn square(k: usize, vals: &[f64]) -> Mat64 {
    Mat64::from_vec(k, k, vals[..k * k].to_vec()).unwrap()
}

// η = K - n at step 1 pins the negative count at exactly n
fn fixed_n(k: usize, n: usize) -> DshSchedule {
    DshSchedule {
        batch_size: k,
        eta: (k - n) as f64,
        mu: n,
        step: 1,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn kl_is_nonnegative_and_zero_only_at_uniform(
        alpha in prop::collection::vec(1.0f64..5.0, 1..12),
        t_seed in any::<usize>(),
    ) {
        let k = alpha.len();
        let t = t_seed % k;
        let mut y = vec![0.0; k];
        y[t] = 1.0;
        let (v, _) = loss_kl(&DirichletParams::new(alpha.clone()).unwrap(), &y).unwrap();
        prop_assert!(v >= 0.0);
        let uniform = alpha.iter().enumerate().all(|(j, &a)| j == t || a == 1.0);
        if !uniform {
            let off: f64 = alpha.iter().enumerate().filter(|&(j, _)| j != t).map(|(_, a)| a - 1.0).sum();
            if off > 1e-3 {
                prop_assert!(v > 0.0);
            }
        } else {
            prop_assert!(v.abs() <= 1e-9);
        }
    }

    #[test]
    fn dsh_with_one_negative_is_the_hardest_negative_hinge(
        k in 2usize..=32,
        vals in prop::collection::vec(-1.0f64..1.0, 32 * 32),
        ids in prop::collection::vec(0usize..40, 32),
    ) {
        let s = square(k, &vals);
        let mut ids = ids;
        ids[1] = ids[0] + 1; // at least two identities
        let labels = labels_for(k, &ids);
        prop_assume!((0..k).all(|i| (0..k).any(|j| ids[j] != ids[i])));
        let cfg = LossConfig { tau_h: 1e-3, gamma: 0.2, ..LossConfig::default() };
        let dsh = loss_dsh(&s, &labels, &fixed_n(k, 1), &cfg).unwrap().value;
        let hardest = loss_triplet(&s, &labels, &cfg).unwrap().value;
        prop_assert!((dsh - hardest).abs() <= 1e-6, "{} vs {}", dsh, hardest);
    }

    #[test]
    fn dsh_is_non_decreasing_in_n(
        vals in prop::collection::vec(-1.0f64..1.0, 64),
        ids in prop::collection::vec(0usize..5, 8),
    ) {
        let k = 8;
        let s = square(k, &vals);
        let labels = labels_for(k, &ids);
        prop_assume!((0..k).all(|i| (0..k).any(|j| ids[j] != ids[i])));
        let cfg = LossConfig::default();
        let mut prev = 0.0;
        for n in 1..=k {
            let v = loss_dsh(&s, &labels, &fixed_n(k, n), &cfg).unwrap().value;
            prop_assert!(v >= prev - 1e-12);
            prev = v;
        }
    }

    #[test]
    fn tal_is_within_the_lse_gap_of_the_max_hinge(
        k in 2usize..=16,
        vals in prop::collection::vec(-1.0f64..1.0, 256),
    ) {
        let s = square(k, &vals);
        let labels = BatchLabels::aligned((0..k).collect());
        let cfg = LossConfig { tau_t: 1e-3, margin: 0.1, ..LossConfig::default() };
        let tal = loss_tal(&s, &labels, &cfg).unwrap().value;
        let mut bound = 0.0;
        for i in 0..k {
            let row_max = (0..k).filter(|&j| j != i).map(|j| s[(i, j)]).fold(f64::MIN, f64::max);
            let col_max = (0..k).filter(|&j| j != i).map(|j| s[(j, i)]).fold(f64::MIN, f64::max);
            bound += (0.1 - s[(i, i)] + row_max).max(0.0) + (0.1 - s[(i, i)] + col_max).max(0.0);
        }
        bound /= k as f64;
        // each of the two directions may exceed its max-hinge by at most τ·ln K
        prop_assert!(tal >= bound - 1e-12);
        prop_assert!(tal <= bound + 2.0 * (1e-3 * (k as f64).ln() + 1e-6));
        // the max hinge is the triplet baseline at γ = m
        let trl = loss_triplet(&s, &labels, &cfg).unwrap().value;
        prop_assert!((trl - bound).abs() < 1e-12);
    }

    #[test]
    fn active_hinges_are_shift_invariant(
        vals in prop::collection::vec(-1.0f64..1.0, 36),
        c in -0.5f64..0.5,
    ) {
        let k = 6;
        let s = square(k, &vals);
        let shifted = s.map(|v| v + c);
        let labels = BatchLabels::aligned(vec![0, 1, 2, 3, 0, 1]);
        // margins large enough that every hinge stays active
        let cfg = LossConfig { gamma: 5.0, margin: 5.0, tau_h: 0.1, tau_t: 0.1, ..LossConfig::default() };
        let sched = fixed_n(k, 3);
        let a = loss_dsh(&s, &labels, &sched, &cfg).unwrap().value;
        let b = loss_dsh(&shifted, &labels, &sched, &cfg).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-12);
        let a = loss_tal(&s, &labels, &cfg).unwrap().value;
        let b = loss_tal(&shifted, &labels, &cfg).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-12);
    }
}
