use dynlite::symexpr::{Bindings, CompareResult, DivError, SymExpr};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SYMS: [&str; 3] = ["N", "sumN", "b"];

fn e(s: &str) -> SymExpr {
    s.parse().unwrap()
}

fn poly() -> impl Strategy<Value = SymExpr> {
    let term = (-6i64..=6, 0u32..=2, 0u32..=2, 0u32..=1);
    prop::collection::vec(term, 0..5).prop_map(|terms| {
        let mut acc = SymExpr::zero();
        for (c, p0, p1, p2) in terms {
            let mut t = SymExpr::constant(c);
            for (sym, pow) in SYMS.iter().zip([p0, p1, p2]) {
                for _ in 0..pow {
                    t = &t * &SymExpr::symbol(sym);
                }
            }
            acc = &acc + &t;
        }
        acc
    })
}

fn bindings() -> impl Strategy<Value = Bindings> {
    (1i64..40, 1i64..40, 1i64..40).prop_map(|(a, b, c)| SYMS.iter().map(|s| s.to_string()).zip([a, b, c]).collect())
}

fn random_poly(rng: &mut ChaCha8Rng) -> SymExpr {
    let mut acc = SymExpr::zero();
    for _ in 0..rng.gen_range(0..4) {
        let mut t = SymExpr::constant(rng.gen_range(-4..=6));
        for sym in SYMS {
            for _ in 0..rng.gen_range(0..=2) {
                t = &t * &SymExpr::symbol(sym);
            }
        }
        acc = &acc + &t;
    }
    acc
}

proptest! {
    #[test]
    fn ring_laws_hold_structurally(a in poly(), b in poly(), c in poly()) {
        prop_assert_eq!(&(&a + &b) + &c, &a + &(&b + &c));
        prop_assert_eq!(&(&a * &b) * &c, &a * &(&b * &c));
        prop_assert_eq!(&a + &b, &b + &a);
        prop_assert_eq!(&a * &b, &b * &a);
        prop_assert_eq!(&a * &(&b + &c), &(&a * &b) + &(&a * &c));
        prop_assert!((&a - &a).is_zero());
    }

    #[test]
    fn evaluation_is_a_homomorphism(a in poly(), b in poly(), env in bindings()) {
        let (x, y) = (a.evaluate(&env).unwrap(), b.evaluate(&env).unwrap());
        prop_assert_eq!((&a + &b).evaluate(&env).unwrap(), x + y);
        prop_assert_eq!((&a - &b).evaluate(&env).unwrap(), x - y);
        prop_assert_eq!((&a * &b).evaluate(&env).unwrap(), x * y);
    }

    #[test]
    fn exact_division_recovers_the_factor(q in poly(), b in poly()) {
        let a = &q * &b;
        match a.div_exact(&b) {
            Ok(got) => prop_assert_eq!(&got * &b, a),
            Err(DivError::ZeroDivisor) => prop_assert!(b.is_zero()),
            Err(DivError::NotDivisible) => prop_assert!(false, "{} / {} should divide", a, b),
        }
    }

    #[test]
    fn printing_round_trips(a in poly()) {
        prop_assert_eq!(e(&a.to_string()), a);
    }
}

#[test]
fn division_results_always_multiply_back() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..2000 {
        let (a, b) = (random_poly(&mut rng), random_poly(&mut rng));
        if let Ok(q) = a.div_exact(&b) {
            assert_eq!(&q * &b, a, "{a} / {b}");
        }
    }
}

#[test]
fn comparison_verdicts_survive_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut decided = 0;
    for i in 0..1000 {
        let a = random_poly(&mut rng);
        // Bias a share of pairs toward related expressions so that every
        // verdict kind is exercised.
        let b = match i % 4 {
            0 => &a + &random_poly(&mut rng),
            1 => &a * &SymExpr::constant(rng.gen_range(1..4)),
            _ => random_poly(&mut rng),
        };
        let verdict = a.compare(&b);
        if verdict != CompareResult::Unknown {
            decided += 1;
        }
        for _ in 0..100 {
            let env: Bindings = SYMS.iter().map(|s| (s.to_string(), rng.gen_range(1..60))).collect();
            let (x, y) = (a.evaluate(&env).unwrap(), b.evaluate(&env).unwrap());
            let holds = match verdict {
                CompareResult::Equal => x == y,
                CompareResult::ProvablyGE => x >= y,
                CompareResult::ProvablyLE => x <= y,
                CompareResult::Unknown => true,
            };
            assert!(holds, "{a} vs {b}: {verdict:?} broken at {env:?}");
        }
    }
    assert!(decided > 200, "only {decided} pairs decided");
}

#[test]
fn memory_size_examples() {
    assert_eq!(e("N*4096").compare(&e("N*32*128")), CompareResult::Equal);
    assert_eq!(e("N*4096").compare(&e("sumN*2*128")), CompareResult::Unknown);
    assert_eq!(e("4096*N").div_exact(&e("256*sumN")), Err(DivError::NotDivisible));
    assert_eq!(e("32*N*M").div_exact(&e("8*N")), Ok(e("4*M")));
    assert_eq!(e("(sumN - N) + N"), e("sumN"));
}
