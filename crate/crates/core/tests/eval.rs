use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slotnav_core::eval::{
    check_split_hygiene, invalid_extraction_rate, joint_goal_accuracy, position_accuracy, slot_accuracy,
    tagging_accuracy, SeedSummary,
};
use slotnav_core::schema::{Dialogue, DialogueState, Ontology, Turn};
use slotnav_core::text::GoldLabels;

const VALUES: [Option<&str>; 4] = [None, Some("x"), Some("y"), Some("dontcare")];

fn state(idx: &[usize]) -> DialogueState {
    DialogueState::from_values(idx.iter().map(|&i| VALUES[i].map(str::to_string)).collect())
}

proptest! {
    #[test]
    fn metrics_match_a_recount(
        rows in prop::collection::vec((prop::collection::vec(0usize..4, 3), prop::collection::vec(0usize..4, 3)), 1..60),
    ) {
        let o = Ontology::new(["a", "b", "c"], ["dontcare"]).unwrap();
        let pred: Vec<DialogueState> = rows.iter().map(|(p, _)| state(p)).collect();
        let gold: Vec<DialogueState> = rows.iter().map(|(_, g)| state(g)).collect();
        let jga = joint_goal_accuracy(&pred, &gold).unwrap();
        let whole = rows.iter().filter(|(p, g)| p == g).count() as f64 / rows.len() as f64;
        prop_assert_eq!(jga, whole);
        let acc = slot_accuracy(&pred, &gold, &o).unwrap();
        for (n, (_, a)) in acc.iter().enumerate() {
            let want = rows.iter().filter(|(p, g)| p[n] == g[n]).count() as f64 / rows.len() as f64;
            prop_assert_eq!(*a, want);
            prop_assert!(jga <= *a);
        }
    }

    #[test]
    fn seed_summary_is_mean_and_sample_deviation(xs in prop::collection::vec(0.0f64..1.0, 2..8)) {
        let s = SeedSummary::new(xs.clone());
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        prop_assert!((s.mean - mean).abs() < 1e-12);
        prop_assert!((s.spread - var.sqrt()).abs() < 1e-12);
    }
}

#[test]
fn misaligned_inputs_error() {
    let o = Ontology::new(["a", "b", "c"], ["dontcare"]).unwrap();
    assert!(joint_goal_accuracy(&[state(&[0, 0, 0])], &[]).is_err());
    assert!(slot_accuracy(&[state(&[0, 0, 0])], &[state(&[0, 0])], &o).is_err());
}

fn gold(iob: &[usize], mask: &[bool], positions: &[usize], resolvable: &[bool]) -> GoldLabels {
    GoldLabels {
        iob: iob.to_vec(),
        iob_mask: mask.to_vec(),
        positions: positions.to_vec(),
        resolvable: resolvable.to_vec(),
        targets: Vec::new(),
        value_spans: Vec::new(),
    }
}

#[test]
fn hand_scored_tagging_and_positions() {
    let t = [true; 4];
    // (pred iob, gold iob, mask, expected hits, expected total)
    let tagging: [(&[usize], &[usize], &[bool], usize, usize); 10] = [
        (&[0, 0, 0, 0], &[0, 0, 0, 0], &t, 4, 4),
        (&[1, 2, 0, 0], &[1, 2, 0, 0], &t, 4, 4),
        (&[1, 1, 0, 0], &[1, 2, 0, 0], &t, 3, 4),
        (&[0, 0, 0, 0], &[1, 2, 3, 4], &t, 0, 4),
        (&[3, 4, 0, 1], &[3, 4, 0, 0], &t, 3, 4),
        (&[1, 2, 0, 0], &[3, 4, 0, 0], &[false, false, true, true], 2, 2),
        (&[1, 2, 9, 9], &[1, 2, 0, 0], &[true, true, false, false], 2, 2),
        (&[2, 2, 2, 2], &[2, 2, 2, 1], &t, 3, 4),
        (&[0, 3, 0, 3], &[0, 3, 4, 3], &[true, false, true, true], 2, 3),
        (&[0, 0, 0, 0], &[0, 0, 0, 0], &[false; 4], 0, 0),
    ];
    let (mut hit, mut total) = (0, 0);
    for (i, (p, g, m, h, n)) in tagging.iter().enumerate() {
        let gl = gold(g, m, &[], &[]);
        let got = tagging_accuracy(&[p.to_vec()], &[&gl]);
        let want = (*n > 0).then(|| *h as f64 / *n as f64);
        assert_eq!(got, want, "tagging case {i}");
        hit += h;
        total += n;
    }
    // pooled over turns, not averaged per turn
    let golds: Vec<GoldLabels> = tagging.iter().map(|(_, g, m, _, _)| gold(g, m, &[], &[])).collect();
    let refs: Vec<&GoldLabels> = golds.iter().collect();
    let preds: Vec<Vec<usize>> = tagging.iter().map(|(p, ..)| p.to_vec()).collect();
    assert_eq!(tagging_accuracy(&preds, &refs), Some(hit as f64 / total as f64));

    // (pred pointers, gold pointers, resolvable, expected hits, expected total)
    let positions: [(&[usize], &[usize], &[bool], usize, usize); 10] = [
        (&[5, 9], &[5, 9], &[true, true], 2, 2),
        (&[5, 8], &[5, 9], &[true, true], 1, 2),
        (&[4, 8], &[5, 9], &[true, true], 0, 2),
        (&[4, 9], &[5, 9], &[false, true], 1, 1),
        (&[4, 8], &[5, 9], &[false, false], 0, 0),
        (&[12, 3, 7], &[12, 3, 7], &[true, true, true], 3, 3),
        (&[12, 3, 7], &[12, 7, 3], &[true, true, true], 1, 3),
        (&[0, 0, 0], &[12, 7, 3], &[true, false, true], 0, 2),
        (&[1], &[1], &[true], 1, 1),
        (&[], &[2, 4], &[true, true], 0, 2),
    ];
    for (i, (p, g, r, h, n)) in positions.iter().enumerate() {
        let gl = gold(&[], &[], g, r);
        let got = position_accuracy(&[p.to_vec()], &[&gl]);
        let want = (*n > 0).then(|| *h as f64 / *n as f64);
        assert_eq!(got, want, "position case {i}");
    }
}

#[test]
fn invalid_rate_tracks_sampling_probability() {
    assert_eq!(invalid_extraction_rate(&[]), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for p in [0.0, 0.1, 0.35, 0.9] {
        let valid: Vec<bool> = (0..40_000).map(|_| !rng.random_bool(p)).collect();
        let rate = invalid_extraction_rate(&valid);
        // four standard errors
        let tol = 4.0 * (p * (1.0 - p) / 40_000.0_f64).sqrt() + 1e-12;
        assert!((rate - p).abs() <= tol, "p {p} rate {rate}");
    }
}

fn dialogue(id: &str, movie: &str) -> Dialogue {
    Dialogue {
        id: id.into(),
        turns: vec![Turn {
            system: String::new(),
            user: format!("see {movie}"),
            state: DialogueState::from_values(vec![Some(movie.into()), None]),
            spans: Vec::new(),
            coref: Default::default(),
        }],
    }
}

#[test]
fn hygiene_flags_shared_values() {
    let o = Ontology::new(["movie", "date"], ["dontcare"]).unwrap();
    let train = [dialogue("a", "big fish"), dialogue("b", "dontcare")];
    let clean = [dialogue("c", "heat"), dialogue("d", "dontcare")];
    let dirty = [dialogue("e", "Big Fish")];
    let slots = ["movie".to_string()];
    assert!(check_split_hygiene(&o, &train, &clean, &slots).is_ok());
    assert!(check_split_hygiene(&o, &train, &dirty, &slots).is_err());
    assert!(check_split_hygiene(&o, &train, &clean, &["genre".to_string()]).is_err());
}
