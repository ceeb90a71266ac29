use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::events::{ActionEvent, ActionType, Candidate, RequestContext, Vocab};
use crate::numerics::{finite_diff_check, Mask, ParamKind, ParamStore, Tape, Tensor};
use crate::Error;

const DAY: u64 = 86_400;

fn vocab() -> Vocab {
    Vocab {
        n_items: 20,
        n_surfaces: 3,
        n_meta: 5,
        n_devices: 2,
        n_advertisers: 4,
        d_content: 4,
    }
}

fn small_cfg() -> SeqConfig {
    SeqConfig {
        layers: 2,
        d_model: 8,
        heads: 2,
        latent_dim: 4,
        d_ff: Some(16),
        query_tokens: 2,
        lora_rank: 2,
        emb_dim: 3,
        ..SeqConfig::default()
    }
}

fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let gain = store.kind(id) == ParamKind::Gain;
        for v in store.get_mut(id).data_mut() {
            let u: f64 = rng.random_range(-1.0..1.0);
            *v = if gain { 1.0 + 0.3 * u } else { scale * u };
        }
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn random_events(rng: &mut ChaCha8Rng, n: usize, v: &Vocab, end: u64) -> Vec<ActionEvent> {
    let mut times: Vec<u64> = (0..n).map(|_| rng.random_range(0..end)).collect();
    times.sort_unstable();
    times
        .into_iter()
        .map(|t| ActionEvent {
            timestamp_s: t,
            action_type: ActionType::ALL[rng.random_range(0..4)],
            item_id: rng.random_range(0..v.n_items),
            surface_id: rng.random_range(0..v.n_surfaces),
            content_vec: rng
                .random_bool(0.7)
                .then(|| (0..v.d_content).map(|_| rng.random_range(-1.0..1.0)).collect()),
            meta_id: rng.random_range(0..v.n_meta),
        })
        .collect()
}

struct Request {
    candidate: Candidate,
    context: RequestContext,
    cross: Vec<f64>,
}

impl Request {
    fn new(time: u64) -> Self {
        Self {
            candidate: Candidate {
                ad_id: 3,
                advertiser_id: 1,
                content_vec: vec![0.5, -0.5, 0.5, 0.5],
            },
            context: RequestContext {
                request_time_s: time,
                surface_id: 2,
                device_id: 1,
            },
            cross: vec![0.3, 0.1],
        }
    }

    fn input(&self) -> QueryInput<'_> {
        QueryInput::Candidate {
            candidate: &self.candidate,
            context: &self.context,
            cross_features: &self.cross,
        }
    }
}

fn module(cfg: SeqConfig, seed: u64) -> (ParamStore, SeqModule) {
    let mut store = ParamStore::new();
    let m = SeqModule::new(&mut store, "seq", cfg, vocab()).unwrap();
    randomize(&mut store, seed, 0.4);
    (store, m)
}

fn summaries(store: &ParamStore, m: &SeqModule, events: &[ActionEvent], req: &Request) -> Vec<Tensor> {
    let mut tape = Tape::new(store);
    let out = m.forward(&mut tape, events, &req.input(), false).unwrap();
    out.summaries.iter().map(|&v| tape.value(v).clone()).collect()
}

// ---------- time encoding ----------

#[test]
fn periods_span_hour_to_ninety_days_with_daily_pin() {
    let p = time_periods_hours();
    assert_eq!(p[0], 1.0);
    assert!((p[TIME_PAIRS - 1] - 2160.0).abs() < 1e-9);
    assert_eq!(p.iter().filter(|&&x| x == 24.0).count(), 1);
    assert!(p.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn zero_age_encodes_phase_zero() {
    let dims: Vec<usize> = (0..16).collect();
    let v = time_encode(500, 500, &dims).unwrap();
    for k in 0..TIME_PAIRS {
        assert_eq!(v[2 * k], 0.0);
        assert_eq!(v[2 * k + 1], 1.0);
    }
}

#[test]
fn daily_pair_is_periodic_in_one_day() {
    let k = daily_pair();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let delta: f64 = rng.random_range(0.0..1e7);
        let a = time_features(delta);
        let b = time_features(delta + DAY as f64);
        assert!((a[2 * k] - b[2 * k]).abs() < 1e-9);
        assert!((a[2 * k + 1] - b[2 * k + 1]).abs() < 1e-9);
    }
}

#[test]
fn quarter_day_hits_peak_of_daily_sine() {
    let k = daily_pair();
    let f = time_features(6.0 * 3600.0);
    assert!((f[2 * k] - 1.0).abs() < 1e-12);
    assert!(f[2 * k + 1].abs() < 1e-12);
    assert!(f.iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn future_event_time_is_rejected() {
    assert!(time_encode(11, 10, &[0, 1]).is_err());
    assert_eq!(time_encode(0, 10, &[0, 1, 2]).unwrap().len(), 3);
}

// ---------- tokenization and fusion ----------

fn tokens(store: &ParamStore, m: &SeqModule, events: &[ActionEvent], reference: u64) -> crate::Result<Tensor> {
    let mut tape = Tape::new(store);
    let x = tokenize(&mut tape, events, &m.weights.tokenizer, &m.cfg, &m.vocab, reference)?;
    Ok(tape.value(x).clone())
}

#[test]
fn tokenize_empty_and_deterministic() {
    let (store, m) = module(small_cfg(), 3);
    assert_eq!(tokens(&store, &m, &[], 100).unwrap().shape(), &[0, 8]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ev = random_events(&mut rng, 6, &m.vocab, 10 * DAY);
    let a = tokens(&store, &m, &ev, 10 * DAY).unwrap();
    let b = tokens(&store, &m, &ev, 10 * DAY).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), &[6, 8]);
}

#[test]
fn timestamp_only_changes_time_dims() {
    let cfg = SeqConfig {
        time_dims: Some(vec![1, 3, 4, 6]),
        ..small_cfg()
    };
    let (store, m) = module(cfg, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ev = random_events(&mut rng, 1, &m.vocab, DAY);
    ev[0].timestamp_s = 3 * DAY + 5000;
    let mut ev2 = ev.clone();
    // same hour of day, so the hour embedding is shared
    ev2[0].timestamp_s = 2 * DAY + 5000;
    let a = tokens(&store, &m, &ev, 10 * DAY).unwrap();
    let b = tokens(&store, &m, &ev2, 10 * DAY).unwrap();
    let dims = [1, 3, 4, 6];
    for j in 0..8 {
        if dims.contains(&j) {
            continue;
        }
        assert_eq!(a.get(0, j), b.get(0, j), "dim {j}");
    }
    assert!(dims.iter().any(|&j| a.get(0, j) != b.get(0, j)));
}

#[test]
fn out_of_range_ids_name_the_table() {
    let (store, m) = module(small_cfg(), 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ev = random_events(&mut rng, 3, &m.vocab, DAY);
    ev[1].surface_id = 9;
    match tokens(&store, &m, &ev, DAY) {
        Err(Error::IdOutOfRange { table, id, .. }) => {
            assert_eq!(table, "surface");
            assert_eq!(id, 9);
        }
        other => panic!("unexpected {other:?}"),
    }
    ev[1].surface_id = 0;
    ev[2].item_id = 20;
    assert!(matches!(tokens(&store, &m, &ev, DAY), Err(Error::IdOutOfRange { table: "item", .. })));
}

#[test]
fn fusion_places_queries_last() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let xs = random_tensor(&mut rng, 3, 4);
    let qs = random_tensor(&mut rng, 2, 4);
    let x = tape.constant(xs.clone());
    let q = tape.constant(qs.clone());
    let f = fuse_query_tokens(&mut tape, x, q).unwrap();
    let fv = tape.value(f).clone();
    assert_eq!(fv.rows(), 5);
    assert_eq!(fv.row(3), qs.row(0));
    assert_eq!(fv.row(4), qs.row(1));
    assert_eq!(fv.row(0), xs.row(0));

    let empty = tape.constant(Tensor::zeros(&[0, 4]));
    let only_q = fuse_query_tokens(&mut tape, empty, q).unwrap();
    assert_eq!(tape.value(only_q), &qs);
    let no_q = tape.constant(Tensor::zeros(&[0, 4]));
    let only_x = fuse_query_tokens(&mut tape, x, no_q).unwrap();
    assert_eq!(tape.value(only_x), &xs);

    let wide = tape.constant(Tensor::zeros(&[2, 5]));
    assert!(matches!(fuse_query_tokens(&mut tape, x, wide), Err(Error::Shape { .. })));
}

// ---------- latent attention ----------

fn mla_store(d: usize, h: usize, dc: usize, seed: u64) -> (ParamStore, MlaWeights) {
    let mut store = ParamStore::new();
    let w = MlaWeights::register(&mut store, "mla", d, h, dc);
    randomize(&mut store, seed, 0.6);
    (store, w)
}

/// Straight-line dense attention with explicit loops.
fn oracle_attention(x: &Tensor, v: &MlaValues, eps: f64) -> Tensor {
    let n = x.rows();
    let h = v.w_q_up.len();
    let dc = v.kv_gain.numel();
    let lin = |row: &[f64], w: &Tensor| -> Vec<f64> {
        (0..w.cols())
            .map(|j| (0..row.len()).map(|i| row[i] * w.get(i, j)).sum())
            .collect()
    };
    let norm = |row: Vec<f64>, g: &Tensor| -> Vec<f64> {
        let ms = row.iter().map(|a| a * a).sum::<f64>() / row.len() as f64;
        let r = 1.0 / (ms + eps).sqrt();
        row.iter().zip(g.data()).map(|(a, gi)| a * r * gi).collect()
    };
    let cq: Vec<Vec<f64>> = (0..n).map(|i| norm(lin(x.row(i), &v.w_q_down), &v.q_gain)).collect();
    let ckv: Vec<Vec<f64>> = (0..n).map(|i| norm(lin(x.row(i), &v.w_kv_down), &v.kv_gain)).collect();
    let mut concat = vec![vec![0.0; h * dc]; n];
    for head in 0..h {
        let q: Vec<Vec<f64>> = cq.iter().map(|r| lin(&r[head * dc..(head + 1) * dc], &v.w_q_up[head])).collect();
        let k: Vec<Vec<f64>> = ckv.iter().map(|r| lin(r, &v.w_k_up[head])).collect();
        let val: Vec<Vec<f64>> = ckv.iter().map(|r| lin(r, &v.w_v_up[head])).collect();
        for i in 0..n {
            let s: Vec<f64> = (0..=i)
                .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (dc as f64).sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, ej) in e.iter().enumerate() {
                for c in 0..dc {
                    concat[i][head * dc + c] += ej / z * val[j][c];
                }
            }
        }
    }
    let rows: Vec<Vec<f64>> = concat.iter().map(|r| lin(r, &v.w_out)).collect();
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn naive_attention_matches_dense_oracle() {
    let (store, w) = mla_store(8, 2, 4, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random_tensor(&mut rng, 8, 8);
    let got = mla_naive_forward(&store, &w, &x, &Mask::causal(8), 1e-6).unwrap();
    let want = oracle_attention(&x, &w.values(&store), 1e-6);
    assert!(got.max_abs_diff(&want) < 1e-10, "{}", got.max_abs_diff(&want));
}

#[test]
fn single_token_attention_is_projected_value() {
    let (store, w) = mla_store(6, 2, 3, 13);
    let v = w.values(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = random_tensor(&mut rng, 1, 6);
    let got = mla_naive_forward(&store, &w, &x, &Mask::causal(1), 1e-6).unwrap();
    let ckv = crate::numerics::rms_norm(&crate::numerics::matmul(&x, &v.w_kv_down).unwrap(), &v.kv_gain, 1e-6).unwrap();
    let heads: Vec<Tensor> = v.w_v_up.iter().map(|wv| crate::numerics::matmul(&ckv, wv).unwrap()).collect();
    let cat = Tensor::matrix(1, 6, heads.iter().flat_map(|t| t.data().to_vec()).collect());
    let want = crate::numerics::matmul(&cat, &v.w_out).unwrap();
    assert!(got.max_abs_diff(&want) < 1e-14);
    let fused = absorb_weights(&v).unwrap();
    let abs = mla_absorbed(&x, &fused, &Mask::causal(1), 1e-6).unwrap();
    assert!(abs.max_abs_diff(&want) < 1e-12);
}

#[test]
fn zero_input_gives_zero_attention() {
    let (store, w) = mla_store(6, 2, 3, 15);
    let x = Tensor::zeros(&[4, 6]);
    let got = mla_naive_forward(&store, &w, &x, &Mask::causal(4), 1e-6).unwrap();
    assert!(got.data().iter().all(|&v| v == 0.0));
    let fused = absorb_weights(&w.values(&store)).unwrap();
    let abs = mla_absorbed(&x, &fused, &Mask::causal(4), 1e-6).unwrap();
    assert!(abs.data().iter().all(|&v| v == 0.0));
}

#[test]
fn absorbing_identities_gives_identity() {
    let (mut store, w) = mla_store(4, 1, 2, 16);
    store.set(w.w_q_up[0], Tensor::identity(2)).unwrap();
    store.set(w.w_k_up[0], Tensor::identity(2)).unwrap();
    let f = absorb_weights(&w.values(&store)).unwrap();
    assert_eq!(f.w_qk[0], Tensor::identity(2));
}

#[test]
fn absorbing_zero_up_projections_gives_zero() {
    let (mut store, w) = mla_store(6, 2, 3, 17);
    for ids in [&w.w_q_up, &w.w_k_up, &w.w_v_up] {
        for &id in ids {
            store.set(id, Tensor::zeros(&[3, 3])).unwrap();
        }
    }
    let f = absorb_weights(&w.values(&store)).unwrap();
    for t in f.w_qk.iter().chain(&f.w_vo) {
        assert!(t.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn absorbed_path_agrees_under_input_scaling() {
    let (store, w) = mla_store(8, 2, 4, 18);
    let fused = absorb_weights(&w.values(&store)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = random_tensor(&mut rng, 10, 8);
    for c in [1.0, 10.0] {
        let xs = x.scale(c);
        let a = mla_naive_forward(&store, &w, &xs, &Mask::causal(10), 1e-6).unwrap();
        let b = mla_absorbed(&xs, &fused, &Mask::causal(10), 1e-6).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-10);
    }
}

#[test]
fn suffix_queries_match_full_attention_rows() {
    let (store, w) = mla_store(8, 2, 4, 20);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random_tensor(&mut rng, 9, 8);
    let full = mla_naive_forward(&store, &w, &x, &Mask::causal(9), 1e-6).unwrap();
    let part = mla_naive_forward(&store, &w, &x, &Mask::causal_suffix(4, 9), 1e-6).unwrap();
    assert_eq!(part, full.slice_rows(5, 9));
    let fused = absorb_weights(&w.values(&store)).unwrap();
    let abs = mla_absorbed(&x, &fused, &Mask::causal_suffix(4, 9), 1e-6).unwrap();
    assert!(abs.max_abs_diff(&part) < 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn absorbed_equals_naive(
        t in 1usize..=64,
        d in 1usize..=32,
        h in 1usize..=4,
        dc_frac in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let dc = 1 + ((d - 1) as f64 * dc_frac) as usize;
        let (store, w) = mla_store(d, h, dc, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
        let x = random_tensor(&mut rng, t, d);
        let a = mla_naive_forward(&store, &w, &x, &Mask::causal(t), 1e-6).unwrap();
        let f = absorb_weights(&w.values(&store)).unwrap();
        let b = mla_absorbed(&x, &f, &Mask::causal(t), 1e-6).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-10, "diff {}", a.max_abs_diff(&b));
    }
}

// ---------- layers ----------

fn layer_store(d: usize, seed: u64) -> (ParamStore, LayerWeights) {
    let mut store = ParamStore::new();
    let lw = LayerWeights {
        mla: MlaWeights::register(&mut store, "l.mla", d, 2, 3),
        norm1: store.register("l.norm1", ParamKind::Gain, &[d]),
        ffn_w1: store.register("l.w1", ParamKind::Matrix, &[d, 2 * d]),
        ffn_w2: store.register("l.w2", ParamKind::Matrix, &[2 * d, d]),
        norm2: store.register("l.norm2", ParamKind::Gain, &[d]),
    };
    randomize(&mut store, seed, 0.5);
    (store, lw)
}

fn run_layer(store: &ParamStore, lw: &LayerWeights, r: &Tensor, rows_out: usize) -> crate::Result<Tensor> {
    let mut tape = Tape::new(store);
    let rv = tape.constant(r.clone());
    let out = transformer_layer(&mut tape, rv, lw, rows_out, 1e-6, None)?;
    Ok(tape.value(out).clone())
}

#[test]
fn zero_weight_layer_is_double_rms_norm() {
    let mut store = ParamStore::new();
    let d = 5;
    let lw = LayerWeights {
        mla: MlaWeights::register(&mut store, "l.mla", d, 2, 3),
        norm1: store.register("l.norm1", ParamKind::Gain, &[d]),
        ffn_w1: store.register("l.w1", ParamKind::Matrix, &[d, 10]),
        ffn_w2: store.register("l.w2", ParamKind::Matrix, &[10, d]),
        norm2: store.register("l.norm2", ParamKind::Gain, &[d]),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let r = random_tensor(&mut rng, 4, d);
    let out = run_layer(&store, &lw, &r, 4).unwrap();
    let ones = Tensor::full(&[d], 1.0);
    let want = crate::numerics::rms_norm(&crate::numerics::rms_norm(&r, &ones, 1e-6).unwrap(), &ones, 1e-6).unwrap();
    assert_eq!(out, want);
}

#[test]
fn layer_preserves_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for seed in 0..5 {
        let d = rng.random_range(3..12);
        let rows = rng.random_range(1..15);
        let (store, lw) = layer_store(d, seed);
        let r = random_tensor(&mut rng, rows, d);
        assert_eq!(run_layer(&store, &lw, &r, rows).unwrap().shape(), &[rows, d]);
    }
}

#[test]
fn trimmed_layer_equals_full_layer_then_trim() {
    let (store, lw) = layer_store(6, 24);
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let r = random_tensor(&mut rng, 10, 6);
    let full = run_layer(&store, &lw, &r, 10).unwrap();
    let part = run_layer(&store, &lw, &r, 4).unwrap();
    assert_eq!(part, full.slice_rows(6, 10));
    assert!(run_layer(&store, &lw, &r, 11).is_err());
}

#[test]
fn layer_input_gradient_matches_finite_differences() {
    let (mut store, lw) = layer_store(5, 26);
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let r_id = store.register("r", ParamKind::Matrix, &[4, 5]);
    store.set(r_id, random_tensor(&mut rng, 4, 5)).unwrap();
    let c = random_tensor(&mut rng, 4, 5);
    let report = finite_diff_check(&store, 1e-5, 1e-4, |tape| {
        let r = tape.param(r_id);
        let x = transformer_layer(tape, r, &lw, 4, 1e-6, None)?;
        let cv = tape.constant(c.clone());
        let y = tape.mul(x, cv)?;
        Ok(tape.sum(y))
    })
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn trim_keeps_suffix() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, -(i as f64)]).collect();
    let x = tape.constant(Tensor::from_rows(&rows).unwrap());
    let same = pyramidal_trim(&mut tape, x, 10, 4).unwrap();
    assert_eq!(same, x);
    let q = pyramidal_trim(&mut tape, x, 4, 4).unwrap();
    assert_eq!(tape.value(q).data().iter().step_by(2).copied().collect::<Vec<_>>(), vec![6.0, 7.0, 8.0, 9.0]);
    let seven = pyramidal_trim(&mut tape, x, 7, 4).unwrap();
    assert_eq!(tape.value(seven).get(0, 0), 3.0);
    assert_eq!(tape.value(seven).rows(), 7);
    assert!(pyramidal_trim(&mut tape, x, 11, 4).is_err());
    assert!(pyramidal_trim(&mut tape, x, 3, 4).is_err());
}

// ---------- forward ----------

#[test]
fn full_schedule_matches_no_schedule() {
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let ev = random_events(&mut rng, 9, &vocab(), 5 * DAY);
    let req = Request::new(5 * DAY);
    let (store, m) = module(small_cfg(), 29);
    let plain = summaries(&store, &m, &ev, &req);
    let full = SeqModule {
        cfg: SeqConfig {
            schedule: Some(vec![11, 11]),
            ..m.cfg.clone()
        },
        ..m.clone()
    };
    assert_eq!(summaries(&store, &full, &ev, &req), plain);
    assert_eq!(plain.len(), 2);
    assert_eq!(plain[0].shape(), &[1, 8]);
}

#[test]
fn forward_with_pyramid_matches_explicit_trim() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let ev = random_events(&mut rng, 9, &vocab(), 5 * DAY);
    let req = Request::new(5 * DAY);
    let cfg = SeqConfig {
        schedule: Some(vec![6, 2]),
        ..small_cfg()
    };
    let (store, m) = module(cfg, 31);
    let got = summaries(&store, &m, &ev, &req);

    let mut tape = Tape::new(&store);
    let x = tokenize(&mut tape, &ev, &m.weights.tokenizer, &m.cfg, &m.vocab, req.context.request_time_s).unwrap();
    let items = tape.param(m.weights.tokenizer.e_item);
    let q = query_tokens(&mut tape, &ev, &req.input(), items, &m.weights.query, &m.cfg, &m.vocab).unwrap();
    let mut h = fuse_query_tokens(&mut tape, x, q).unwrap();
    for (lw, keep) in m.weights.layers.iter().zip([6, 2]) {
        let rows = tape.value(h).rows();
        h = transformer_layer(&mut tape, h, lw, rows, 1e-6, None).unwrap();
        h = pyramidal_trim(&mut tape, h, keep, 2).unwrap();
    }
    let flat = tape.reshape(h, vec![1, 16]).unwrap();
    for (k, mlp) in m.weights.readout.iter().enumerate() {
        let z = readout_lora(&mut tape, flat, mlp).unwrap();
        assert!(tape.value(z).max_abs_diff(&got[k]) < 1e-12);
    }
}

#[test]
fn perturbing_later_events_leaves_earlier_rows_unchanged() {
    let (store, m) = module(small_cfg(), 32);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let ev = random_events(&mut rng, 8, &m.vocab, 5 * DAY);
    let req = Request::new(5 * DAY);
    let hidden = |events: &[ActionEvent]| -> Vec<Tensor> {
        let mut tape = Tape::new(&store);
        let x = tokenize(&mut tape, events, &m.weights.tokenizer, &m.cfg, &m.vocab, 5 * DAY).unwrap();
        let items = tape.param(m.weights.tokenizer.e_item);
        let q = query_tokens(&mut tape, events, &req.input(), items, &m.weights.query, &m.cfg, &m.vocab).unwrap();
        let mut h = fuse_query_tokens(&mut tape, x, q).unwrap();
        let mut out = Vec::new();
        for lw in &m.weights.layers {
            let rows = tape.value(h).rows();
            h = transformer_layer(&mut tape, h, lw, rows, 1e-6, None).unwrap();
            out.push(tape.value(h).clone());
        }
        out
    };
    let base = hidden(&ev);
    for j in 0..ev.len() {
        let mut pert = ev.clone();
        pert[j].item_id = (pert[j].item_id + 7) % m.vocab.n_items;
        pert[j].content_vec = None;
        let changed = hidden(&pert);
        for (a, b) in base.iter().zip(&changed) {
            for i in 0..j {
                assert_eq!(a.row(i), b.row(i), "row {i} moved after perturbing {j}");
            }
        }
        assert_ne!(base[0].row(j), changed[0].row(j));
    }
}

#[test]
fn empty_history_still_produces_summaries() {
    let (store, m) = module(small_cfg(), 34);
    let req = Request::new(DAY);
    let s = summaries(&store, &m, &[], &req);
    assert_eq!(s.len(), 2);
    assert!(s.iter().all(|t| t.is_finite()));
}

#[test]
fn user_only_mode_ignores_candidate() {
    let cfg = SeqConfig {
        mode: QueryMode::UserOnly,
        ..small_cfg()
    };
    let (store, m) = module(cfg, 35);
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    let ev = random_events(&mut rng, 5, &m.vocab, DAY);
    let mut tape = Tape::new(&store);
    let input = QueryInput::User { reference_time_s: DAY };
    let out = m.forward(&mut tape, &ev, &input, false).unwrap();
    assert_eq!(out.summaries.len(), 2);
    let req = Request::new(DAY);
    assert!(matches!(m.forward(&mut tape, &ev, &req.input(), false), Err(Error::Config(_))));
}

// ---------- readout ----------

fn readout_store(rin: usize, hid: usize, out: usize, r: usize) -> (ParamStore, LoraMlp) {
    let mut store = ParamStore::new();
    let lin = |store: &mut ParamStore, p: &str, i: usize, o: usize| LoraLinear {
        w: store.register(format!("{p}.w"), ParamKind::Matrix, &[i, o]),
        bias: store.register(format!("{p}.bias"), ParamKind::Bias, &[o]),
        a: store.register(format!("{p}.a"), ParamKind::Matrix, &[i, r]),
        b: store.register(format!("{p}.b"), ParamKind::Matrix, &[r, o]),
    };
    let mlp = LoraMlp {
        l1: lin(&mut store, "l1", rin, hid),
        l2: lin(&mut store, "l2", hid, out),
    };
    randomize(&mut store, 37, 0.5);
    (store, mlp)
}

fn run_readout(store: &ParamStore, mlp: &LoraMlp, x: &Tensor) -> Tensor {
    let mut tape = Tape::new(store);
    let xv = tape.constant(x.clone());
    let y = readout_lora(&mut tape, xv, mlp).unwrap();
    tape.value(y).clone()
}

fn plain_mlp(x: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Tensor {
    let silu = |v: f64| v / (1.0 + (-v).exp());
    let h: Vec<f64> = (0..w1.cols())
        .map(|j| silu((0..x.cols()).map(|i| x.get(0, i) * w1.get(i, j)).sum::<f64>() + b1.data()[j]))
        .collect();
    let y = (0..w2.cols())
        .map(|j| (0..h.len()).map(|i| h[i] * w2.get(i, j)).sum::<f64>() + b2.data()[j])
        .collect();
    Tensor::row_vector(y)
}

#[test]
fn zero_adapter_is_base_mlp() {
    let (mut store, mlp) = readout_store(6, 5, 3, 2);
    store.set(mlp.l1.a, Tensor::zeros(&[6, 2])).unwrap();
    store.set(mlp.l2.a, Tensor::zeros(&[5, 2])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(38);
    let x = random_tensor(&mut rng, 1, 6);
    let got = run_readout(&store, &mlp, &x);
    let mut tape = Tape::new(&store);
    let xv = tape.constant(x.clone());
    let w1 = tape.param(mlp.l1.w);
    let b1 = tape.param(mlp.l1.bias);
    let w2 = tape.param(mlp.l2.w);
    let b2 = tape.param(mlp.l2.bias);
    let h = tape.matmul(xv, w1).unwrap();
    let h = tape.add_row(h, b1).unwrap();
    let h = tape.silu(h);
    let y = tape.matmul(h, w2).unwrap();
    let y = tape.add_row(y, b2).unwrap();
    assert_eq!(&got, tape.value(y));
}

#[test]
fn full_rank_adapter_equals_shifted_weights() {
    let (rin, hid, out) = (4, 3, 3);
    let (store, mlp) = readout_store(rin, hid, out, 3);
    let g = |id| store.get(id).clone();
    let mm = |a: &Tensor, b: &Tensor| crate::numerics::matmul(a, b).unwrap();
    let w1 = g(mlp.l1.w).add(&mm(&g(mlp.l1.a), &g(mlp.l1.b))).unwrap();
    let w2 = g(mlp.l2.w).add(&mm(&g(mlp.l2.a), &g(mlp.l2.b))).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(39);
    for _ in 0..5 {
        let x = random_tensor(&mut rng, 1, rin);
        let want = plain_mlp(&x, &w1, &g(mlp.l1.bias), &w2, &g(mlp.l2.bias));
        assert!(run_readout(&store, &mlp, &x).max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn distinct_summaries_differ() {
    let (store, m) = module(small_cfg(), 40);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let ev = random_events(&mut rng, 4, &m.vocab, DAY);
    let s = summaries(&store, &m, &ev, &Request::new(DAY));
    assert!(s[0].max_abs_diff(&s[1]) > 1e-6);
}

// ---------- FLOPs ----------

fn flop_cfg(layers: usize, d: usize, h: usize, dc: usize, d_ff: usize, nq: usize) -> SeqConfig {
    SeqConfig {
        layers,
        d_model: d,
        heads: h,
        latent_dim: dc,
        d_ff: Some(d_ff),
        query_tokens: nq,
        lora_rank: 1,
        ..SeqConfig::default()
    }
}

#[test]
fn hand_evaluated_layer_cost() {
    // T_in = 2 events + 1 query token
    let r = flop_count(&flop_cfg(1, 4, 1, 2, 8, 1), 0, 2);
    assert_eq!(r.per_layer, vec![624]);
    assert_eq!(r.seq_flops, 624);
    assert_eq!(48 + 48 + 24 + 36 + 36 + 48 + 384, 624);
    assert_eq!(flop_count(&flop_cfg(0, 4, 1, 2, 8, 1), 0, 50).seq_flops, 0);
}

#[test]
fn doubling_rows_scales_terms() {
    let (d, h, dc, f) = (16u64, 2u64, 8u64, 64u64);
    let t = 10u64;
    let quad = |t: u64| 4 * t * t * h * dc;
    let lin = |t: u64| layer_flops(t, d, h, dc, f) - quad(t);
    assert_eq!(quad(2 * t), 4 * quad(t));
    assert_eq!(lin(2 * t), 2 * lin(t));
    assert_eq!(layer_flops(2 * t, d, h, dc, f), 4 * quad(t) + 2 * lin(t));
}

#[test]
fn pyramid_reduces_cost() {
    let mut cfg = flop_cfg(3, 16, 2, 8, 64, 4);
    let full = flop_count(&cfg, 16, 100).seq_flops;
    cfg.schedule = Some(vec![60, 20, 4]);
    let pyr = flop_count(&cfg, 16, 100);
    assert!(pyr.seq_flops < full);
    assert_eq!(pyr.per_layer[0], layer_flops(104, 16, 2, 8, 64));
    assert_eq!(pyr.per_layer[1], layer_flops(60, 16, 2, 8, 64));
    assert_eq!(pyr.per_layer[2], layer_flops(20, 16, 2, 8, 64));
}

proptest! {
    #[test]
    fn flops_monotone(
        layers in 1usize..4, d in 2usize..32, h in 1usize..4, dc in 1usize..8,
        f in 1usize..64, t in 0usize..200, which in 0usize..6,
    ) {
        let dc = dc.min(d);
        let base = flop_cfg(layers, d, h, dc, f, 2);
        let c0 = flop_count(&base, 4, t).seq_flops;
        let (bigger, t1) = match which {
            0 => (flop_cfg(layers + 1, d, h, dc, f, 2), t),
            1 => (flop_cfg(layers, d + 1, h, dc, f, 2), t),
            2 => (flop_cfg(layers, d, h + 1, dc, f, 2), t),
            3 => (flop_cfg(layers, d.max(dc + 1), h, dc + 1, f, 2), t),
            4 => (flop_cfg(layers, d, h, dc, f + 1, 2), t),
            _ => (base.clone(), t + 1),
        };
        prop_assert!(flop_count(&bigger, 4, t1).seq_flops > c0);
    }

    #[test]
    fn smaller_schedule_never_costs_more(
        t in 0usize..100, a in 0usize..120, b in 0usize..120, shrink in 0usize..50,
    ) {
        let nq = 4;
        let (hi, lo) = (a.max(b) + nq, a.min(b) + nq);
        let mut cfg = flop_cfg(3, 8, 2, 4, 16, nq);
        cfg.schedule = Some(vec![hi, lo, nq]);
        let c1 = flop_count(&cfg, 4, t).seq_flops;
        cfg.schedule = Some(vec![hi.saturating_sub(shrink).max(lo), lo.saturating_sub(shrink).max(nq), nq]);
        prop_assert!(flop_count(&cfg, 4, t).seq_flops <= c1);
    }
}

// ---------- probing ----------

fn probe_of(seed: u64, n: usize, request: u64, span: u64) -> AttnProbe {
    let cfg = SeqConfig {
        schedule: Some(vec![n + 2, 2]),
        ..small_cfg()
    };
    let (store, m) = module(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let ev = random_events(&mut rng, n, &m.vocab, span);
    let ev: Vec<ActionEvent> = ev
        .into_iter()
        .map(|mut e| {
            e.timestamp_s += request - span;
            e
        })
        .collect();
    let req = Request::new(request);
    let mut tape = Tape::new(&store);
    m.forward(&mut tape, &ev, &req.input(), true).unwrap().probe.unwrap()
}

#[test]
fn probe_rows_sum_to_one() {
    let p = probe_of(42, 12, 10 * DAY, 5 * DAY);
    assert_eq!(p.layers.len(), 2);
    assert_eq!(p.layers[1].heads[0].shape(), &[2, 14]);
    for lp in &p.layers {
        assert_eq!(lp.heads.len(), 2);
        for h in &lp.heads {
            for i in 0..h.rows() {
                assert!((h.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn full_window_recent_mass_is_one() {
    let p = probe_of(43, 10, 10 * DAY, 5 * DAY);
    let rep = attention_report(std::slice::from_ref(&p), 0);
    assert_eq!(rep.recent_mass.len(), 10);
    assert!((rep.recent_mass[9] - 1.0).abs() < 1e-12);
    assert!((rep.topk_mass[9] - 1.0).abs() < 1e-12);
    assert_eq!(rep.rows_used, 2 * 2);
    let total: f64 = rep.hourly_total.values().sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn last_hour_events_land_in_bucket_zero() {
    let p = probe_of(44, 6, 10 * DAY, 3000);
    let rep = attention_report(&[p], 1);
    assert_eq!(rep.hourly_total.keys().copied().collect::<Vec<_>>(), vec![0]);
    assert!((rep.hourly_total[&0] - 1.0).abs() < 1e-12);
}

#[test]
fn zero_event_mass_rows_are_excluded() {
    let p = AttnProbe {
        request_time_s: 100,
        event_times: vec![10, 20],
        layers: vec![LayerProbe {
            col_offset: 0,
            row_offset: 2,
            heads: vec![Tensor::matrix(2, 4, vec![0.0, 0.0, 1.0, 0.0, 0.25, 0.25, 0.25, 0.25])],
        }],
    };
    let rep = attention_report(&[p], 0);
    assert_eq!(rep.rows_excluded, 1);
    assert_eq!(rep.rows_used, 1);
    assert_eq!(rep.recent_mass, vec![0.5, 1.0]);
}

#[test]
fn report_csv_headers() {
    let p = probe_of(45, 5, 10 * DAY, DAY);
    let rep = attention_report(&[p], 0);
    let mut a = Vec::new();
    write_mass_csv(&rep, &mut a).unwrap();
    let a = String::from_utf8(a).unwrap();
    assert!(a.starts_with("k,recent_mass,topk_mass\n1,"));
    assert_eq!(a.lines().count(), 6);
    let mut b = Vec::new();
    write_hourly_csv(&rep, &mut b).unwrap();
    assert!(String::from_utf8(b).unwrap().starts_with("bucket_hours,total_mass,mean_mass_per_event\n"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn topk_dominates_recent(seed in any::<u64>(), n in 1usize..12, rows in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols = n + rows;
        let mut data = Vec::new();
        for i in 0..rows {
            let ext = n + i + 1;
            let raw: Vec<f64> = (0..ext).map(|_| rng.random_range(0.0..1.0)).collect();
            let z: f64 = raw.iter().sum();
            data.extend(raw.iter().map(|v| v / z));
            data.extend(std::iter::repeat_n(0.0, cols - ext));
        }
        let mut times: Vec<u64> = (0..n).map(|_| rng.random_range(0..100_000)).collect();
        times.sort_unstable();
        let p = AttnProbe {
            request_time_s: 100_000,
            event_times: times,
            layers: vec![LayerProbe { col_offset: 0, row_offset: n, heads: vec![Tensor::matrix(rows, cols, data)] }],
        };
        let rep = attention_report(&[p], 0);
        for (t, r) in rep.topk_mass.iter().zip(&rep.recent_mass) {
            prop_assert!(t + 1e-12 >= *r);
        }
    }
}

#[test]
fn causal_suffix_mask_matches_dense_definition() {
    let m = Mask::causal_suffix(3, 7);
    let dense = Mask::from_fn(3, 7, |i, j| j <= i + 4);
    for i in 0..3 {
        assert_eq!(m.row_extent(i), dense.row_extent(i));
        for j in 0..7 {
            assert_eq!(m.allowed(i, j), dense.allowed(i, j));
        }
    }
}

#[test]
fn config_validation() {
    let mut cfg = small_cfg();
    assert!(cfg.validate().is_ok());
    cfg.schedule = Some(vec![5, 6]);
    assert!(cfg.validate().is_err());
    cfg.schedule = Some(vec![5, 1]);
    assert!(cfg.validate().is_err());
    cfg.schedule = Some(vec![5]);
    assert!(cfg.validate().is_err());
    cfg.schedule = None;
    cfg.latent_dim = 9;
    assert!(cfg.validate().is_err());
    let s = small_cfg().cross_attention_schedule(10);
    assert_eq!(s, vec![12, 2]);
}
