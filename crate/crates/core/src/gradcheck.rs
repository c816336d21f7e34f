//! Finite-difference verification of analytic gradients. A model exposes a
//! scalar loss plus parameter visitation; `grad_check` probes a stratified
//! random subsample of parameters with central differences and reports the
//! worst relative error per layer kind.

use std::collections::HashSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::Network;
use crate::error::{Result, SefcnError};
use crate::layers::{Mode, StateItem, StateRole};
use crate::loss::combined_loss;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Anything with a differentiable scalar loss over visitable parameters.
pub trait GradModel<T: Scalar> {
    /// Loss at the current parameters, leaving gradients untouched.
    fn loss(&mut self) -> Result<f64>;
    /// Loss at the current parameters, with gradients freshly accumulated.
    fn loss_and_grad(&mut self) -> Result<f64>;
    fn visit_params(&mut self, f: &mut dyn FnMut(StateItem<'_, T>));
}

/// Binds a network to one fixed batch so the combined objective becomes a
/// function of the parameters alone.
pub struct NetModel<'a, T: Scalar> {
    pub net: &'a mut Network<T>,
    pub input: Tensor<T>,
    pub labels: Tensor<f32>,
    pub weights: Vec<f64>,
    pub lambda: f64,
}

impl<'a, T: Scalar> GradModel<T> for NetModel<'a, T> {
    fn loss(&mut self) -> Result<f64> {
        let probs = self.net.forward(&self.input, Mode::Train)?;
        let (loss, _) = combined_loss(&probs, &self.labels, &self.weights, self.lambda)?;
        Ok(loss)
    }

    fn loss_and_grad(&mut self) -> Result<f64> {
        let probs = self.net.forward(&self.input, Mode::Train)?;
        let (loss, dlogits) =
            combined_loss(&probs, &self.labels, &self.weights, self.lambda)?;
        self.net.zero_grads();
        self.net.backward(&dlogits)?;
        Ok(loss)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(StateItem<'_, T>)) {
        self.net.visit_state(f);
    }
}

/// Worst relative error among the probed parameters of one layer kind.
#[derive(Clone, Debug)]
pub struct KindReport {
    pub kind: &'static str,
    pub checked: usize,
    pub max_rel: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel: f64,
    pub per_kind: Vec<KindReport>,
}

impl GradReport {
    pub fn lines(&self) -> String {
        let mut s = format!("checked={} max_rel={:.3e}\n", self.checked, self.max_rel);
        for k in &self.per_kind {
            s.push_str(&format!(
                "  kind={} checked={} max_rel={:.3e}\n",
                k.kind, k.checked, k.max_rel
            ));
        }
        s
    }
}

struct ParamSlot {
    kind: &'static str,
    len: usize,
    grad: Vec<f64>,
}

fn read_param<T: Scalar>(model: &mut dyn GradModel<T>, slot: usize, elem: usize) -> f64 {
    let mut idx = 0;
    let mut out = 0.0;
    model.visit_params(&mut |item| {
        if item.role == StateRole::Param && item.grad.is_some() {
            if idx == slot {
                out = item.value.data()[elem].to_f64();
            }
            idx += 1;
        }
    });
    out
}

fn write_param<T: Scalar>(model: &mut dyn GradModel<T>, slot: usize, elem: usize, v: f64) {
    let mut idx = 0;
    model.visit_params(&mut |item| {
        if item.role == StateRole::Param && item.grad.is_some() {
            if idx == slot {
                item.value.data_mut()[elem] = T::from_f64(v);
            }
            idx += 1;
        }
    });
}

/// Central-difference check of `count` parameters, stratified evenly across
/// layer kinds, with step `h`. The denominator floor keeps the relative
/// error meaningful for near-zero gradients.
pub fn grad_check<T: Scalar>(
    model: &mut dyn GradModel<T>,
    count: usize,
    h: f64,
    seed: u64,
) -> Result<GradReport> {
    model.loss_and_grad()?;
    let mut slots: Vec<ParamSlot> = Vec::new();
    model.visit_params(&mut |item| {
        if item.role == StateRole::Param {
            if let Some(grad) = &item.grad {
                slots.push(ParamSlot {
                    kind: item.kind,
                    len: item.value.len(),
                    grad: grad.data().iter().map(|&g| g.to_f64()).collect(),
                });
            }
        }
    });
    if slots.is_empty() {
        return Err(SefcnError::input("grad_check: model has no parameters"));
    }

    // Stable first-appearance order of kinds, with per-kind capacity.
    let mut kinds: Vec<&'static str> = Vec::new();
    for s in &slots {
        if !kinds.contains(&s.kind) {
            kinds.push(s.kind);
        }
    }
    let capacity: Vec<usize> = kinds
        .iter()
        .map(|k| slots.iter().filter(|s| s.kind == *k).map(|s| s.len).sum())
        .collect();
    let total_capacity: usize = capacity.iter().sum();
    if total_capacity < count {
        return Err(SefcnError::input(format!(
            "grad_check: requested {count} probes but the model has only {total_capacity} parameters"
        )));
    }

    // Even split across kinds, capped by capacity; leftover spills over in
    // kind order until the requested total is reached exactly.
    let mut quota = vec![0usize; kinds.len()];
    let mut remaining = count;
    let share = count / kinds.len();
    for (q, cap) in quota.iter_mut().zip(&capacity) {
        *q = share.min(*cap);
        remaining -= *q;
    }
    while remaining > 0 {
        let mut progressed = false;
        for (q, cap) in quota.iter_mut().zip(&capacity) {
            if remaining > 0 && *q < *cap {
                *q += 1;
                remaining -= 1;
                progressed = true;
            }
        }
        assert!(progressed, "quota allocation stalled");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report: Vec<KindReport> = kinds
        .iter()
        .map(|k| KindReport {
            kind: k,
            checked: 0,
            max_rel: 0.0,
        })
        .collect();
    let mut checked = 0;
    for (ki, kind) in kinds.iter().enumerate() {
        let members: Vec<usize> = (0..slots.len()).filter(|&i| slots[i].kind == *kind).collect();
        let mut drawn: HashSet<(usize, usize)> = HashSet::new();
        while drawn.len() < quota[ki] {
            let mut offset = rng.random_range(0..capacity[ki]);
            let mut pick = (usize::MAX, 0);
            for &si in &members {
                if offset < slots[si].len {
                    pick = (si, offset);
                    break;
                }
                offset -= slots[si].len;
            }
            if !drawn.insert(pick) {
                continue;
            }
            let (si, ei) = pick;
            let analytic = slots[si].grad[ei];
            let orig = read_param(model, si, ei);
            write_param(model, si, ei, orig + h);
            let plus = model.loss()?;
            write_param(model, si, ei, orig - h);
            let minus = model.loss()?;
            write_param(model, si, ei, orig);
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            if rel > report[ki].max_rel {
                report[ki].max_rel = rel;
            }
            report[ki].checked += 1;
            checked += 1;
        }
    }
    let max_rel = report.iter().fold(0.0f64, |m, k| m.max(k.max_rel));
    Ok(GradReport {
        checked,
        max_rel,
        per_kind: report,
    })
}
