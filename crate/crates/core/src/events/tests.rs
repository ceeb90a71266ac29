use proptest::prelude::*;

use super::*;

fn stream(kinds: &[u8]) -> Vec<ActionEvent> {
    kinds
        .iter()
        .enumerate()
        .map(|(i, k)| ActionEvent {
            timestamp_s: i as u64 * 10,
            action_type: ActionType::ALL[*k as usize % 4],
            item_id: i,
            surface_id: 0,
            content_vec: None,
            meta_id: 0,
        })
        .collect()
}

#[test]
fn mean_events_per_user_matches_rate() {
    let cfg = GeneratorConfig {
        num_users: 10_000,
        horizon_days: 2,
        long_range_days: 1,
        events_per_day: 8.0,
        num_items: 100,
        ..GeneratorConfig::default()
    };
    let users = generate_users(&cfg).unwrap();
    let counts: Vec<f64> = users.iter().map(|u| u.events.len() as f64).collect();
    let mean = counts.iter().sum::<f64>() / counts.len() as f64;
    let expected = 16.0;
    // Poisson counts: variance equals the mean.
    let sigma = (expected / counts.len() as f64).sqrt();
    assert!((mean - expected).abs() < 3.0 * sigma, "mean {mean}, sigma {sigma}");
}

#[test]
fn positive_rate_tracks_target() {
    let cfg = GeneratorConfig {
        num_users: 300,
        horizon_days: 6,
        long_range_days: 2,
        requests_per_user: 20,
        target_positive_rate: 0.05,
        num_items: 300,
        ..GeneratorConfig::default()
    };
    let ds = generate_dataset(&cfg).unwrap();
    let all: Vec<_> = ds.train.iter().chain(&ds.eval).collect();
    let rate = all.iter().map(|e| e.labels.get(Head::Ctr)).sum::<f64>() / all.len() as f64;
    assert!((rate - 0.05).abs() <= 0.1 * 0.05, "rate {rate}");
}

/// Mean lag-24 autocorrelation of per-user hourly counts.
fn daily_autocorrelation(users: &[UserHistory], hours: usize) -> (f64, f64) {
    let acfs: Vec<f64> = users
        .iter()
        .map(|u| {
            let mut counts = vec![0.0; hours];
            for e in &u.events {
                counts[(e.timestamp_s / SECONDS_PER_HOUR) as usize] += 1.0;
            }
            let mean = counts.iter().sum::<f64>() / hours as f64;
            let var: f64 = counts.iter().map(|c| (c - mean).powi(2)).sum();
            if var == 0.0 {
                return 0.0;
            }
            let cov: f64 = (0..hours - 24).map(|h| (counts[h] - mean) * (counts[h + 24] - mean)).sum();
            cov / var
        })
        .collect();
    let n = acfs.len() as f64;
    let mean = acfs.iter().sum::<f64>() / n;
    let sd = (acfs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    (mean, sd / n.sqrt())
}

#[test]
fn seasonality_shows_up_only_when_planted() {
    let base = GeneratorConfig {
        num_users: 300,
        horizon_days: 14,
        long_range_days: 2,
        events_per_day: 24.0,
        num_items: 100,
        ..GeneratorConfig::default()
    };
    let hours = 14 * 24;
    let flat = generate_users(&GeneratorConfig {
        seasonality_amplitude: 0.0,
        ..base.clone()
    })
    .unwrap();
    let (acf, se) = daily_autocorrelation(&flat, hours);
    // Sample autocorrelation of white noise is biased by about -1/n.
    assert!((acf + 1.0 / hours as f64).abs() < 3.0 * se, "flat acf {acf} se {se}");

    let seasonal = generate_users(&GeneratorConfig {
        seasonality_amplitude: 0.9,
        ..base
    })
    .unwrap();
    let (acf, se) = daily_autocorrelation(&seasonal, hours);
    assert!(acf > 10.0 * se && acf > 0.1, "seasonal acf {acf} se {se}");
}

#[test]
fn jsonl_layout_and_round_trip() {
    let cfg = GeneratorConfig {
        num_users: 5,
        horizon_days: 3,
        long_range_days: 1,
        requests_per_user: 2,
        num_items: 50,
        ..GeneratorConfig::default()
    };
    let ds = generate_dataset(&cfg).unwrap();
    let text = to_jsonl_string(&ds.train).unwrap();
    let first = text.lines().next().unwrap();
    let keys = ["\"user_id\"", "\"request_time_s\"", "\"events\"", "\"candidate\"", "\"context\"", "\"labels\""];
    let positions: Vec<usize> = keys.iter().map(|k| first.find(k).unwrap()).collect();
    assert!(positions.windows(2).all(|w| w[0] < w[1]), "{first}");
    let ev_keys = ["\"t\"", "\"type\"", "\"item\"", "\"surface\"", "\"content\"", "\"meta\""];
    let ev_start = first.find("\"events\":[{").unwrap();
    let ev_pos: Vec<usize> = ev_keys.iter().map(|k| ev_start + first[ev_start..].find(k).unwrap()).collect();
    assert!(ev_pos.windows(2).all(|w| w[0] < w[1]));

    let dir = std::env::temp_dir().join(format!("llatte-jsonl-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("train.jsonl");
    write_jsonl(&path, &ds.train).unwrap();
    let back = read_jsonl(&path).unwrap();
    assert_eq!(back, ds.train);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn content_is_written_with_nine_significant_digits() {
    let ev = ActionEvent {
        timestamp_s: 1,
        action_type: ActionType::View,
        item_id: 0,
        surface_id: 0,
        content_vec: Some(vec![0.123_456_789_123, -0.000_987_654_321_9].into()),
        meta_id: 0,
    };
    let s = serde_json::to_string(&ev).unwrap();
    assert!(s.contains("[0.123456789,-0.000987654322]"), "{s}");
}

proptest! {
    #[test]
    fn composed_sequences_are_time_sorted(kinds in proptest::collection::vec(0u8..4, 0..200), t in 0usize..120, a in 0usize..120) {
        let events = stream(&kinds);
        let a = a.min(t);
        let out = compose_sequence(&events, a, t - a);
        prop_assert!(out.windows(2).all(|w| w[0].timestamp_s < w[1].timestamp_s));
        prop_assert!(out.len() <= t);
        let available = events.iter().filter(|e| e.action_type != ActionType::Organic).count();
        prop_assert_eq!(out.len(), t.min(available));
    }

    #[test]
    fn selection_is_monotone(kinds in proptest::collection::vec(0u8..4, 0..200), t in 0usize..120, a in 0usize..120) {
        let events = stream(&kinds);
        let a = a.min(t);
        let pure_views: Vec<u64> = compose_sequence(&events, t, 0).iter().map(|e| e.timestamp_s).collect();
        let pure_convs: Vec<u64> = compose_sequence(&events, 0, t).iter().map(|e| e.timestamp_s).collect();
        for e in compose_sequence(&events, a, t - a) {
            prop_assert!(pure_views.contains(&e.timestamp_s) || pure_convs.contains(&e.timestamp_s));
        }
    }
}
