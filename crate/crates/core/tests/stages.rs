mod common;

use rand::Rng;

use ragscope::flow::{changepoint_stages, quartile_stages, Stage, StageMethod, StageSegmentation};

fn sse(c: &[f64]) -> f64 {
    let m = c.iter().sum::<f64>() / c.len() as f64;
    c.iter().map(|v| (v - m).powi(2)).sum()
}

/// Every choice of three interior boundaries, earliest kept on ties.
fn exhaustive(curve: &[f64]) -> ([usize; 3], f64) {
    let n = curve.len();
    let mut best = ([0; 3], f64::INFINITY);
    for a in 1..n {
        for b in a + 1..n {
            for c in b + 1..n {
                let e = sse(&curve[..a]) + sse(&curve[a..b]) + sse(&curve[b..c]) + sse(&curve[c..]);
                if e < best.1 - 1e-9 * e.abs().max(1.0) {
                    best = ([a, b, c], e);
                }
            }
        }
    }
    best
}

fn check_shape(s: &StageSegmentation, n: usize) {
    assert!(s.is_valid());
    assert_eq!(s.ranges[0].start, 0);
    assert_eq!(s.ranges[3].end, n);
    for w in s.ranges.windows(2) {
        assert_eq!(w[0].end, w[1].start);
    }
    for l in 0..n {
        let hits = Stage::ALL
            .iter()
            .filter(|&&st| s.range(st).contains(&l))
            .count();
        assert_eq!(hits, 1);
    }
}

#[test]
fn both_methods_give_four_contiguous_exhaustive_ranges() {
    let mut rng = common::rng(61);
    for n in 4..40 {
        check_shape(&quartile_stages(n).unwrap(), n);
        for _ in 0..5 {
            let curve: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let s = changepoint_stages(&curve).unwrap();
            assert_eq!(s.method, StageMethod::Changepoint);
            check_shape(&s, n);
        }
        check_shape(&changepoint_stages(&vec![0.25; n]).unwrap(), n);
    }
    assert!(quartile_stages(3).is_err());
    assert!(changepoint_stages(&[1.0, 2.0, 3.0]).is_err());
}

#[test]
fn three_jump_step_curve_is_recovered() {
    let mut rng = common::rng(62);
    for _ in 0..200 {
        let n = rng.random_range(6..=32);
        let b = loop {
            let mut b = [
                rng.random_range(1..n),
                rng.random_range(1..n),
                rng.random_range(1..n),
            ];
            b.sort_unstable();
            if b[0] < b[1] && b[1] < b[2] {
                break b;
            }
        };
        // Consecutive levels differ by at least 0.5.
        let mut levels = vec![rng.random_range(-1.0..1.0)];
        for _ in 0..3 {
            let step = rng.random_range(0.5..2.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            levels.push(levels.last().unwrap() + step);
        }
        let curve: Vec<f64> = (0..n)
            .map(|l| levels[(l >= b[0]) as usize + (l >= b[1]) as usize + (l >= b[2]) as usize])
            .collect();
        let s = changepoint_stages(&curve).unwrap();
        let got = [s.ranges[1].start, s.ranges[2].start, s.ranges[3].start];
        assert_eq!(got, b, "curve {curve:?}");
        assert_eq!(exhaustive(&curve).0, b);
    }
}

#[test]
fn dynamic_program_matches_exhaustive_search() {
    let mut rng = common::rng(63);
    for _ in 0..300 {
        let n = rng.random_range(4..=20);
        let curve: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = changepoint_stages(&curve).unwrap();
        let got = [s.ranges[1].start, s.ranges[2].start, s.ranges[3].start];
        let cost = |b: [usize; 3]| {
            sse(&curve[..b[0]])
                + sse(&curve[b[0]..b[1]])
                + sse(&curve[b[1]..b[2]])
                + sse(&curve[b[2]..])
        };
        let (want, best) = exhaustive(&curve);
        assert!((cost(got) - best).abs() <= 1e-9, "{got:?} vs {want:?}");
        assert_eq!(got, want);
    }
}

#[test]
fn flat_curve_ties_resolve_earliest() {
    let s = changepoint_stages(&[3.0; 9]).unwrap();
    assert_eq!(s.ranges, [0..1, 1..2, 2..3, 3..9]);
}
