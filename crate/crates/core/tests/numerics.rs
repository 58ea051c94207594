use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slotnav_core::numerics::{check_gradients, nll, softmax, Tape, Tensor, Var};

// reference probabilities computed with 60-digit decimal arithmetic
const LOGITS: [f64; 64] = [
    -1.904818, 2.390895, 16.968423, -1.373997, 0.313651, 3.495393, -12.613586, 0.476346, 5.195309, 11.719075,
    -16.235062, -7.863949, -16.373179, 12.385781, 7.737539, -18.324787, 19.287737, 18.590311, 6.156901, 4.622508,
    -13.700236, -19.399971, 1.135251, -17.617956, -12.391669, -10.322279, -18.796696, -1.442622, -2.378755,
    13.697085, 0.764965, 5.611668, -0.009074, 6.497981, -1.706805, -8.873484, 19.906248, 19.827666, 13.608622,
    8.312385, -7.388911, -10.813364, -8.438402, -17.19106, 10.651515, -3.984008, 13.863345, -4.539459, 18.321695,
    13.892391, -19.978203, -11.611303, 16.410877, -1.200509, 19.214358, -4.103024, -17.078466, 5.178196,
    11.140434, -9.208977, -16.514232, -6.696575, 18.563049, 10.321621,
];
const EXPECTED: [f64; 64] = [
    8.88781985380192483367e-11, 6.52228384558984595794e-09, 1.39746089942531185463e-02, 1.51122063324746532433e-10,
    8.17079074550353769671e-10, 1.96823559559855060077e-08, 1.98626135495730310840e-15, 9.61438765575496766674e-10,
    1.07731131253201824212e-07, 7.33798458845818515287e-05, 5.31189338629731171222e-17, 2.29497274963787395588e-13,
    4.62664203071086734361e-17, 1.42930045561308457971e-04, 1.36904486612511127103e-06, 6.57193582106020162955e-18,
    1.42103553198419635395e-01, 7.07484083680353648127e-02, 2.81809299047627503025e-07, 6.07542839645702798800e-08,
    6.70054756132201711606e-16, 2.24257427207935138447e-18, 1.85814856656202962611e-09, 1.33249662153608105430e-17,
    2.47978324620633363316e-15, 1.96398596276799384560e-14, 4.09964110542285690511e-18, 1.41099155913126506523e-10,
    5.53308089162277935992e-11, 5.30414787660495523278e-04, 1.28311998155221550834e-09, 1.63366737636806180969e-07,
    5.91706583864297153117e-10, 3.96355128162677540339e-07, 1.08340590066975304144e-10, 8.36261404174201503341e-14,
    2.63767237922155617369e-01, 2.43833359646207809002e-01, 4.85508268599637107538e-04, 2.43259677555522931506e-06,
    3.69048900017819369490e-13, 1.20188488579787847838e-14, 1.29209892484383523008e-13, 2.04204211031231825243e-17,
    2.52314017176894066100e-05, 1.11125697401776030549e-11, 6.26356262527494214547e-04, 6.37654156960398936896e-12,
    5.40826828656015071162e-02, 6.44816202412430228633e-04, 1.25783556038133746284e-18, 5.41155864409879442292e-15,
    8.00203624330366597439e-03, 1.79751596196196762696e-10, 1.32049524747924695856e-01, 9.86566824988606324800e-12,
    2.28540749130571196074e-17, 1.05903213590859608593e-07, 4.11411286692796898364e-05, 5.97914787888811022386e-14,
    4.01797619434193423778e-17, 7.37499312222568898218e-13, 6.88457186635626910975e-02, 1.81413764065864295278e-05,
];

#[test]
fn softmax_matches_high_precision_reference() {
    let p = softmax(&LOGITS).unwrap();
    for (i, (&got, &want)) in p.iter().zip(&EXPECTED).enumerate() {
        assert!((got - want).abs() <= 1e-12, "entry {i}: {got} vs {want}");
        if want > 1e-4 {
            assert!((got - want).abs() / want <= 1e-12, "entry {i} relative");
        }
    }
    // tape kernel agrees with the free function
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(vec![1, 64], LOGITS.to_vec()));
    let s = tape.softmax(x);
    assert_eq!(tape.value(s).data(), p.as_slice());
}

#[test]
fn softmax_survives_extreme_logits() {
    let p = softmax(&[1e4, 0.0, -1e9]).unwrap();
    assert_eq!(p, vec![1.0, 0.0, 0.0]);
    let p = softmax(&[-1e9_f32; 4]).unwrap();
    assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-7));
    assert!(softmax::<f64>(&[]).is_err());
}

#[test]
fn nll_oracle() {
    assert!((nll(&[0.5, 0.5], 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    assert!((nll(&[0.0, 1.0], 0).unwrap() - 1e12_f64.ln()).abs() < 1e-9);
    assert!(nll(&[1.0], 3).is_err());
}

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect())
}

/// Reduces any tensor to a scalar through a fixed random projection.
fn project(tape: &mut Tape<f64>, x: Var, w: &[f64]) -> Var {
    let n = tape.value(x).len();
    let flat = tape.reshape(x, vec![1, n]);
    let w = tape.constant(Tensor::new(vec![n, 1], w[..n].to_vec()));
    let y = tape.matmul(flat, w);
    tape.sum(y)
}

fn kernel_error(seed: u64, kernel: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (l, d) = (rng.random_range(2..5), 4);
    let mut params = vec![
        random(&mut rng, vec![l, d], 1.0),
        random(&mut rng, vec![d, d], 1.0),
        random(&mut rng, vec![l, d], 1.0),
        random(&mut rng, vec![d], 1.0),
        random(&mut rng, vec![d], 1.0),
    ];
    let w: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mask: Vec<f64> = (0..l * d).map(|_| if rng.random_bool(0.3) { 0.0 } else { 1.0 / 0.7 }).collect();
    let ids: Vec<usize> = (0..3).map(|_| rng.random_range(0..l)).collect();
    let picks: Vec<usize> = (0..3).map(|_| rng.random_range(0..l * d)).collect();
    let r = check_gradients(&mut params, 1e-5, |tape, v| {
        let (x, m, y, g, b) = (v[0], v[1], v[2], v[3], v[4]);
        let out = match kernel {
            0 => tape.matmul(x, m),
            1 => tape.matmul_t(x, y, false, true),
            2 => tape.add(x, y),
            3 => tape.add_row(x, g),
            4 => tape.scale(x, -1.7),
            5 => tape.embed(x, &ids),
            6 => tape.layer_norm(x, g, b, 1e-12),
            7 => tape.gelu(x),
            8 => tape.dropout(x, mask.clone()),
            9 => tape.softmax(x),
            10 => tape.log_softmax(x),
            11 => {
                let s = tape.softmax(x);
                tape.log(s)
            }
            12 => tape.pick(x, &picks),
            13 => tape.mean(x),
            14 => tape.rows(x, 1, l),
            15 => tape.transpose(x),
            16 => tape.mask_fill(x, &picks, -3.0),
            17 => {
                let k = tape.matmul(y, m);
                tape.attention(x, k, y, 2)
            }
            _ => unreachable!(),
        };
        project(tape, out, &w)
    })
    .unwrap();
    r.max_rel_error
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn kernel_gradients_match_finite_differences(seed in any::<u64>()) {
        for kernel in 0..18 {
            let e = kernel_error(seed, kernel);
            prop_assert!(e < 1e-6, "kernel {} error {}", kernel, e);
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = random(&mut rng, vec![3, 4], 1.0);
        let w1: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w2: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grad = |ca: f64, cb: f64| {
            let mut tape = Tape::new();
            let x = tape.param(0, x0.clone());
            let h = tape.gelu(x);
            let s = tape.softmax(h);
            let l1 = project(&mut tape, s, &w1);
            let l2 = project(&mut tape, h, &w2);
            let l1 = tape.scale(l1, ca);
            let l2 = tape.scale(l2, cb);
            let l = tape.add(l1, l2);
            tape.backward(l).param(0).unwrap()
        };
        let g1 = grad(1.0, 0.0);
        let g2 = grad(0.0, 1.0);
        let g = grad(a, b);
        for i in 0..12 {
            let want = a * g1.data()[i] + b * g2.data()[i];
            prop_assert!((g.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(xs in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let p = softmax(&xs).unwrap();
        let total: f64 = p.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        // invariant under a constant shift
        let shifted: Vec<f64> = xs.iter().map(|v| v + 7.25).collect();
        for (a, b) in p.iter().zip(softmax(&shifted).unwrap()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn shared_parameters_accumulate_gradients() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(0, Tensor::new(vec![2], vec![1.0, 2.0]));
    let y = tape.add(x, x);
    let s = tape.sum(y);
    let g = tape.backward(s);
    assert_eq!(g.param(0).unwrap().data(), &[2.0, 2.0]);
}
