#![allow(dead_code)]

use diffrep::tensor::rng::stream;
use diffrep::tensor::{Init, ParamStore, Tensor};
use diffrep::unet::DenoiserModel;

/// Give zero-initialized tensors random values so every path carries signal.
pub fn randomize_zero_params(store: &mut ParamStore, seed: u64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let spec = store.spec(id).clone();
        if spec.trainable && spec.init == Init::Zeros {
            let t = Tensor::uniform(spec.shape.clone(), 0.2, &mut stream(seed, &spec.name, 0));
            store.set(id, t);
        }
    }
}

pub fn randomize_model(model: &mut DenoiserModel, seed: u64) {
    randomize_zero_params(&mut model.params, seed);
}
