use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::{ParamKind, ParamStore};
use crate::rng::stream;

pub const INIT_STD: f64 = 0.02;

/// Matrices ~ N(0, 0.02^2) truncated at 2 sigma, embeddings ~ N(0, 0.02^2),
/// gains 1 and biases 0. Each parameter draws from its own substream.
pub fn init_params(store: &mut ParamStore, seed: u64) {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let kind = store.kind(id);
        let mut rng = stream(seed, "init", id.0 as u64);
        let data = store.get_mut(id).data_mut();
        match kind {
            ParamKind::Gain => data.fill(1.0),
            ParamKind::Bias => data.fill(0.0),
            ParamKind::Embedding => data.iter_mut().for_each(|v| *v = normal.sample(&mut rng)),
            ParamKind::Matrix => data.iter_mut().for_each(|v| *v = truncated(&normal, &mut rng)),
        }
    }
}

fn truncated<R: Rng>(normal: &Normal<f64>, rng: &mut R) -> f64 {
    loop {
        let x = normal.sample(rng);
        if x.abs() <= 2.0 * INIT_STD {
            return x;
        }
    }
}
