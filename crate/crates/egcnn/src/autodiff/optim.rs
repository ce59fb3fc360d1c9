//! AdaGrad with per-coordinate accumulators.

use super::param::ParamStore;

/// One AdaGrad step over every parameter:
/// `acc += grad^2` then `value -= lr * grad / (sqrt(acc) + eps)`,
/// after which all gradients are cleared. Frozen rows are left untouched
/// (neither value nor accumulator moves).
pub fn adagrad_step(store: &mut ParamStore, lr: f64, eps: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        let p = store.get_mut(id);
        let width = p.value.row_width();
        let frozen = std::mem::take(&mut p.frozen_rows);
        for (flat, g) in p.grad.data().to_vec().into_iter().enumerate() {
            if !frozen.is_empty() && frozen.contains(&(flat / width)) {
                continue;
            }
            let a = &mut p.accum.data_mut()[flat];
            *a += g * g;
            p.value.data_mut()[flat] -= lr * g / (a.sqrt() + eps);
        }
        p.frozen_rows = frozen;
        p.grad.data_mut().fill(0.0);
    }
}
