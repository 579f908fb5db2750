//! Context feature layer: feature construction, context-conditioned
//! transformation and slot-level importance.
//!
//! All functions work on a batch of rows (one row per scored example).

use crate::encoder::expect_param;
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

/// Raw ids that make up one example's context.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureIds {
    pub user: u32,
    pub item: u32,
    pub platform: u32,
    pub age: u32,
    pub location: u32,
    pub category: u32,
}

/// Named slice of `E_in`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub name: &'static str,
    pub start: usize,
    pub len: usize,
}

/// Batched `E_in` with its provenance map, plus the `[e_u; e_i; e_p]`
/// context rows the later stages condition on.
#[derive(Clone, Debug)]
pub struct FeatureVector {
    pub e_in: Var,
    pub context: Var,
    pub spans: Vec<Span>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextParams {
    pub user_emb: ParamId,
    pub item_emb: ParamId,
    pub platform_emb: ParamId,
    pub age_emb: ParamId,
    pub location_emb: ParamId,
    pub category_emb: ParamId,
    /// `D x 3d`: maps `[e_u; e_i; e_p]` to a `D`-wide elementwise gate.
    pub w1: ParamId,
    /// `S x (D + 3d)`.
    pub w_slot: ParamId,
    pub dim: usize,
    pub slots: usize,
}

/// Sizes of the id spaces feeding the context layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContextVocab {
    pub users: usize,
    pub items: usize,
    pub platforms: usize,
    pub ages: usize,
    pub locations: usize,
    pub categories: usize,
}

const SPAN_NAMES: [&str; 5] = ["user", "item", "platform", "profile", "category"];

impl ContextParams {
    /// `D`: five spans of width `d`.
    pub fn input_width(&self) -> usize {
        SPAN_NAMES.len() * self.dim
    }

    pub fn spans(&self) -> Vec<Span> {
        spans_for(self.dim)
    }

    pub fn register(
        store: &mut ParamStore,
        vocab: ContextVocab,
        dim: usize,
        slots: usize,
        init: &mut impl FnMut(&[usize], f64) -> Tensor,
    ) -> Result<Self> {
        let d_in = SPAN_NAMES.len() * dim;
        check_slots(d_in, slots)?;
        let emb = 0.1;
        let mut add = |n: &str, t: Tensor| store.add(format!("context.{n}"), t);
        Ok(Self {
            user_emb: add("user_emb", init(&[vocab.users, dim], emb))?,
            item_emb: add("item_emb", init(&[vocab.items, dim], emb))?,
            platform_emb: add("platform_emb", init(&[vocab.platforms, dim], emb))?,
            age_emb: add("age_emb", init(&[vocab.ages, dim], emb))?,
            location_emb: add("location_emb", init(&[vocab.locations, dim], emb))?,
            category_emb: add("category_emb", init(&[vocab.categories, dim], emb))?,
            w1: add("w1", init(&[d_in, 3 * dim], 1.0 / (3.0 * dim as f64).sqrt()))?,
            w_slot: add("w_slot", init(&[slots, d_in + 3 * dim], 1.0 / ((d_in + 3 * dim) as f64).sqrt()))?,
            dim,
            slots,
        })
    }

    pub fn bind(store: &ParamStore, vocab: ContextVocab, dim: usize, slots: usize) -> Result<Self> {
        let d_in = SPAN_NAMES.len() * dim;
        check_slots(d_in, slots)?;
        let get = |n: &str, shape: &[usize]| expect_param(store, &format!("context.{n}"), shape);
        Ok(Self {
            user_emb: get("user_emb", &[vocab.users, dim])?,
            item_emb: get("item_emb", &[vocab.items, dim])?,
            platform_emb: get("platform_emb", &[vocab.platforms, dim])?,
            age_emb: get("age_emb", &[vocab.ages, dim])?,
            location_emb: get("location_emb", &[vocab.locations, dim])?,
            category_emb: get("category_emb", &[vocab.categories, dim])?,
            w1: get("w1", &[d_in, 3 * dim])?,
            w_slot: get("w_slot", &[slots, d_in + 3 * dim])?,
            dim,
            slots,
        })
    }
}

pub fn spans_for(dim: usize) -> Vec<Span> {
    SPAN_NAMES
        .iter()
        .enumerate()
        .map(|(i, &name)| Span {
            name,
            start: i * dim,
            len: dim,
        })
        .collect()
}

/// Slot count must divide the feature width; checked when parameters are
/// created or bound, never per call.
pub fn check_slots(d_in: usize, slots: usize) -> Result<()> {
    if slots == 0 || !d_in.is_multiple_of(slots) {
        return Err(Error::Config(format!(
            "slot count {slots} must be >= 1 and divide feature width {d_in}"
        )));
    }
    Ok(())
}

/// `E_in = [e_u; e_i; e_p; e_age + e_location; e_category]` per row.
pub fn build_features(tape: &mut Tape, store: &ParamStore, p: &ContextParams, ids: &[FeatureIds]) -> Result<FeatureVector> {
    let col = |f: fn(&FeatureIds) -> u32| ids.iter().map(|x| f(x) as usize).collect::<Vec<_>>();
    let e_u = tape.gather(store, p.user_emb, &col(|x| x.user))?;
    let e_i = tape.gather(store, p.item_emb, &col(|x| x.item))?;
    let e_p = tape.gather(store, p.platform_emb, &col(|x| x.platform))?;
    let e_age = tape.gather(store, p.age_emb, &col(|x| x.age))?;
    let e_loc = tape.gather(store, p.location_emb, &col(|x| x.location))?;
    let profile = tape.add(e_age, e_loc)?;
    let e_cat = tape.gather(store, p.category_emb, &col(|x| x.category))?;
    let e_in = tape.concat_cols(&[e_u, e_i, e_p, profile, e_cat])?;
    let context = tape.concat_cols(&[e_u, e_i, e_p])?;
    Ok(FeatureVector {
        e_in,
        context,
        spans: p.spans(),
    })
}

/// `E_trans = (W1 c) ⊙ E_in` with `c = [e_u; e_i; e_p]`. `W1` is `D x 3d`,
/// so the context produces one gate per input dimension rather than a
/// single scalar.
pub fn transform_features(tape: &mut Tape, e_in: Var, context: Var, w1: Var) -> Result<Var> {
    let gate = tape.matmul_bt(context, w1)?;
    tape.mul(gate, e_in)
}

/// `α = sigmoid(W_slot [E_trans; e_u; e_i; e_p])`, one weight per slot.
///
/// `W_slot` is `S x (D + 3d)`, the width of the concatenation.
pub fn slot_importance(tape: &mut Tape, e_trans: Var, context: Var, w_slot: Var) -> Result<Var> {
    let z = tape.concat_cols(&[e_trans, context])?;
    let logits = tape.matmul_bt(z, w_slot)?;
    Ok(tape.sigmoid(logits))
}

/// `Ẽ[j] = α[⌊j S / D⌋] · E_trans[j]`.
pub fn apply_slots(tape: &mut Tape, e_trans: Var, alpha: Var) -> Result<Var> {
    let d = tape.shape(e_trans).1;
    let expanded = tape.repeat_blocks(alpha, d)?;
    tape.mul(e_trans, expanded)
}

/// Full context layer; returns `Ẽ` (`n x D`).
pub fn context_forward(tape: &mut Tape, store: &ParamStore, p: &ContextParams, ids: &[FeatureIds]) -> Result<Var> {
    let fv = build_features(tape, store, p, ids)?;
    let w1 = tape.param(store, p.w1);
    let e_trans = transform_features(tape, fv.e_in, fv.context, w1)?;
    let ws = tape.param(store, p.w_slot);
    let alpha = slot_importance(tape, e_trans, fv.context, ws)?;
    apply_slots(tape, e_trans, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, FD_STEP, FD_TOL};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    const VOCAB: ContextVocab = ContextVocab {
        users: 3,
        items: 4,
        platforms: 2,
        ages: 2,
        locations: 3,
        categories: 2,
    };

    fn setup(dim: usize, slots: usize, seed: u64) -> (ParamStore, ContextParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |shape: &[usize], std: f64| {
            let n: usize = shape.iter().product();
            let d = Normal::new(0.0, std.max(0.3)).unwrap();
            Tensor::new(shape, (0..n).map(|_| d.sample(&mut rng)).collect()).unwrap().requires_grad()
        };
        let mut s = ParamStore::new();
        let p = ContextParams::register(&mut s, VOCAB, dim, slots, &mut init).unwrap();
        (s, p)
    }

    fn ids(user: u32, item: u32) -> FeatureIds {
        FeatureIds { user, item, platform: 1, age: 0, location: 2, category: 1 }
    }

    #[test]
    fn zero_tables_give_zero_features() {
        let (mut s, p) = setup(2, 2, 1);
        for (_, t) in s.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let mut t = Tape::new();
        let fv = build_features(&mut t, &s, &p, &[ids(0, 0)]).unwrap();
        assert_eq!(t.value(fv.e_in), &[0.0; 10]);
    }

    #[test]
    fn spans_tile_the_input() {
        let spans = spans_for(32);
        assert_eq!(spans.iter().map(|s| s.len).sum::<usize>(), 160);
        let mut next = 0;
        for s in &spans {
            assert_eq!(s.start, next);
            next += s.len;
        }
        assert_eq!(next, 160);
    }

    #[test]
    fn slots_must_divide_width() {
        let mut s = ParamStore::new();
        let mut init = |shape: &[usize], _| Tensor::zeros(shape);
        assert!(matches!(
            ContextParams::register(&mut s, VOCAB, 2, 3, &mut init),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_w1_filters_everything() {
        let mut t = Tape::new();
        let e = t.constant(1, 4, vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let c = t.constant(1, 3, vec![0.5, 0.1, -0.3]).unwrap();
        let w = t.constant(4, 3, vec![0.0; 12]).unwrap();
        let y = transform_features(&mut t, e, c, w).unwrap();
        assert!(t.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_gate_is_identity() {
        let mut t = Tape::new();
        let e = t.constant(1, 4, vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let c = t.constant(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        // first column ones, so W1 c = 1
        let w = t
            .constant(4, 3, (0..12).map(|i| if i % 3 == 0 { 1.0 } else { 7.0 }).collect())
            .unwrap();
        let y = transform_features(&mut t, e, c, w).unwrap();
        assert_eq!(t.value(y), &[1.0, -2.0, 3.0, 4.0]);
    }

    #[test]
    fn transform_matches_two_step_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gate: Vec<f64> = (0..6).map(|j| (0..3).map(|k| w[j * 3 + k] * c[k]).sum()).collect();
        let want: Vec<f64> = gate.iter().zip(&e).map(|(g, x)| g * x).collect();
        let mut t = Tape::new();
        let (ev, cv, wv) = (t.constant(1, 6, e).unwrap(), t.constant(1, 3, c).unwrap(), t.constant(6, 3, w).unwrap());
        let y = transform_features(&mut t, ev, cv, wv).unwrap();
        for (g, w) in t.value(y).iter().zip(&want) {
            assert!((g - w).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_slot_weights_give_half() {
        let mut t = Tape::new();
        let e = t.constant(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = t.constant(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let w = t.constant(2, 7, vec![0.0; 14]).unwrap();
        let a = slot_importance(&mut t, e, c, w).unwrap();
        assert_eq!(t.value(a), &[0.5, 0.5]);
        // S = 1: one universal weight
        let w1 = t.constant(1, 7, vec![0.1; 7]).unwrap();
        let a1 = slot_importance(&mut t, e, c, w1).unwrap();
        assert_eq!(t.shape(a1), (1, 1));
        assert!((t.value(a1)[0] - 1.0 / (1.0 + (-1.6f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn slot_importance_matches_oracle() {
        let e = [0.3, -0.2, 0.9, 0.1];
        let c = [0.5, -0.5, 0.25];
        let w: Vec<f64> = (0..14).map(|i| ((i * 5 % 7) as f64 - 3.0) * 0.2).collect();
        let z: Vec<f64> = e.iter().chain(&c).copied().collect();
        let want: Vec<f64> = (0..2)
            .map(|s| {
                let l: f64 = (0..7).map(|k| w[s * 7 + k] * z[k]).sum();
                1.0 / (1.0 + (-l).exp())
            })
            .collect();
        let mut t = Tape::new();
        let (ev, cv, wv) = (
            t.constant(1, 4, e.to_vec()).unwrap(),
            t.constant(1, 3, c.to_vec()).unwrap(),
            t.constant(2, 7, w).unwrap(),
        );
        let a = slot_importance(&mut t, ev, cv, wv).unwrap();
        for (g, w) in t.value(a).iter().zip(&want) {
            assert!((g - w).abs() < 1e-15);
            assert!(*g > 0.0 && *g < 1.0);
        }
    }

    #[test]
    fn slot_sharing_rule() {
        let mut t = Tape::new();
        let e = t.constant(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let a = t.constant(1, 2, vec![1.0, 0.0]).unwrap();
        let y = apply_slots(&mut t, e, a).unwrap();
        assert_eq!(t.value(y), &[1.0, 2.0, 0.0, 0.0]);
        let ones = t.constant(1, 4, vec![1.0; 4]).unwrap();
        let y = apply_slots(&mut t, e, ones).unwrap();
        assert_eq!(t.value(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn apply_slots_six_by_three() {
        let e = [0.5, -1.0, 2.0, 0.25, -0.75, 3.0];
        let a = [0.2, 0.7, 0.9];
        let mut want = [0.0; 6];
        for j in 0..6 {
            want[j] = a[j * 3 / 6] * e[j];
        }
        let mut t = Tape::new();
        let ev = t.constant(1, 6, e.to_vec()).unwrap();
        let av = t.constant(1, 3, a.to_vec()).unwrap();
        let y = apply_slots(&mut t, ev, av).unwrap();
        assert_eq!(t.value(y), &want);
    }

    #[test]
    fn gradient_through_context_layer() {
        let (mut s, p) = setup(2, 5, 12);
        let rows = [ids(0, 1), ids(2, 3)];
        let r = grad_check(
            &mut s,
            |t, st| {
                let y = context_forward(t, st, &p, &rows)?;
                let k = t.constant(2, 10, (0..20).map(|i| (i as f64 * 0.61).cos()).collect())?;
                let m = t.mul(y, k)?;
                Ok(t.sum(m))
            },
            FD_STEP,
            FD_TOL,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    proptest! {
        #[test]
        fn slot_ratios_constant_within_slot(vals in proptest::collection::vec(0.1f64..2.0, 8), alpha in proptest::collection::vec(0.01f64..0.99, 4)) {
            let mut t = Tape::new();
            let e = t.constant(1, 8, vals.clone()).unwrap();
            let a = t.constant(1, 4, alpha).unwrap();
            let y = apply_slots(&mut t, e, a).unwrap();
            let out = t.value(y);
            for s in 0..4 {
                let r0 = out[2 * s] / vals[2 * s];
                let r1 = out[2 * s + 1] / vals[2 * s + 1];
                prop_assert!((r0 - r1).abs() < 1e-12);
            }
        }

        #[test]
        fn transform_is_linear_in_input(a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut t = Tape::new();
            let x1 = t.constant(1, 3, vec![0.3, -0.1, 0.8]).unwrap();
            let x2 = t.constant(1, 3, vec![-0.5, 0.9, 0.2]).unwrap();
            let c = t.constant(1, 3, vec![0.4, 0.4, -0.7]).unwrap();
            let w = t.constant(3, 3, (0..9).map(|i| i as f64 * 0.1 - 0.4).collect()).unwrap();
            let s1 = t.scale(x1, a);
            let s2 = t.scale(x2, b);
            let comb = t.add(s1, s2).unwrap();
            let y = transform_features(&mut t, comb, c, w).unwrap();
            let y1 = transform_features(&mut t, x1, c, w).unwrap();
            let y2 = transform_features(&mut t, x2, c, w).unwrap();
            for j in 0..3 {
                let lin = a * t.value(y1)[j] + b * t.value(y2)[j];
                prop_assert!((t.value(y)[j] - lin).abs() < 1e-12);
            }
        }
    }
}
