//! Classification heads, record reconstruction and the composite loss.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Activation, Linear, Mlp2, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const NUM_CLASSES: usize = 2;
pub const DEFAULT_ALPHA: f64 = 0.001;

/// Two gene classifiers and an optional record reconstructor, all reading
/// the mean-pooled token representation.
#[derive(Clone, Debug)]
pub struct Head {
    pub arms2: Linear,
    pub cfh: Linear,
    pub rra: Option<Mlp2>,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// Mean-pooled representation `[B, D]`.
    pub pooled: Var,
    pub logits_arms2: Var,
    pub logits_cfh: Var,
    /// `[B, t]`, present when reconstruction is enabled.
    pub record_recon: Option<Var>,
}

impl Head {
    /// `record_fields = 0` builds no reconstructor.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        dim: usize,
        record_fields: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let rra = if record_fields > 0 {
            Some(Mlp2::new(store, "head.rra", (dim, dim, record_fields), Activation::Relu, rng)?)
        } else {
            None
        };
        Ok(Self {
            arms2: Linear::new(store, "head.arms2", dim, NUM_CLASSES, rng)?,
            cfh: Linear::new(store, "head.cfh", dim, NUM_CLASSES, rng)?,
            rra,
        })
    }

    /// `z: [B·L, D]` → pooled logits and reconstruction.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, z: Var, batch: usize) -> Result<HeadOutput> {
        let pooled = tape.mean_groups(z, batch)?;
        let logits_arms2 = self.arms2.forward(tape, store, pooled)?;
        let logits_cfh = self.cfh.forward(tape, store, pooled)?;
        let record_recon = match &self.rra {
            Some(rra) => Some(rra.forward(tape, store, pooled)?),
            None => None,
        };
        Ok(HeadOutput { pooled, logits_arms2, logits_cfh, record_recon })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub ce_arms2: f64,
    pub ce_cfh: f64,
    pub mse_record: f64,
    pub alpha: f64,
    pub total: f64,
    /// The scalar to differentiate.
    pub var: Var,
}

fn check_labels(labels: &[usize], gene: &str) -> Result<()> {
    match labels.iter().find(|&&y| y >= NUM_CLASSES) {
        Some(y) => Err(Error::Argument(format!("{gene} label {y} is outside {{0, 1}}"))),
        None => Ok(()),
    }
}

/// `total = ce_arms2 + ce_cfh + alpha · mse`; a missing `mse` counts as zero.
pub fn compose_loss<T: Real>(
    tape: &mut Tape<T>,
    ce_arms2: Var,
    ce_cfh: Var,
    mse: Option<Var>,
    alpha: f64,
) -> Result<LossBreakdown> {
    if !(alpha >= 0.0) {
        return Err(Error::Argument(format!("loss weight alpha must be non-negative, got {alpha}")));
    }
    let mut total = tape.add(ce_arms2, ce_cfh)?;
    if let Some(m) = mse {
        let weighted = tape.scale(m, alpha);
        total = tape.add(total, weighted)?;
    }
    let scalar = |tape: &Tape<T>, v: Var| tape.value(v).data()[0].as_f64();
    Ok(LossBreakdown {
        ce_arms2: scalar(tape, ce_arms2),
        ce_cfh: scalar(tape, ce_cfh),
        mse_record: mse.map_or(0.0, |m| scalar(tape, m)),
        alpha,
        total: scalar(tape, total),
        var: total,
    })
}

/// Cross-entropy on both genes plus weighted record reconstruction error.
/// `record` is the normalized record the reconstruction targets; pass
/// `None` to skip the reconstruction term.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    out: &HeadOutput,
    y_arms2: &[usize],
    y_cfh: &[usize],
    record: Option<&Tensor<T>>,
    alpha: f64,
) -> Result<LossBreakdown> {
    check_labels(y_arms2, "ARMS2")?;
    check_labels(y_cfh, "CFH")?;
    let ce_a = tape.cross_entropy(out.logits_arms2, y_arms2)?;
    let ce_c = tape.cross_entropy(out.logits_cfh, y_cfh)?;
    let mse = match (out.record_recon, record) {
        (Some(recon), Some(target)) => {
            let t = tape.constant(target.clone());
            Some(tape.mse(recon, t)?)
        }
        _ => None,
    };
    compose_loss(tape, ce_a, ce_c, mse, alpha)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn setup(t: usize) -> (ParamStore<f64>, Head, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let head = Head::new(&mut store, 6, t, &mut rng).unwrap();
        (store, head, rng)
    }

    #[test]
    fn output_shapes() {
        let (store, head, mut rng) = setup(3);
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::randn([2 * 5, 6], 1.0, &mut rng));
        let out = head.forward(&mut tape, &store, z, 2).unwrap();
        assert_eq!(tape.shape(out.logits_arms2), &[2, 2]);
        assert_eq!(tape.shape(out.logits_cfh), &[2, 2]);
        assert_eq!(tape.shape(out.record_recon.unwrap()), &[2, 3]);
        let (store, head, _) = setup(0);
        let out = head.forward(&mut tape, &store, z, 2).unwrap();
        assert!(out.record_recon.is_none());
    }

    #[test]
    fn constant_sequence_pools_to_the_token() {
        let (store, head, _) = setup(3);
        let mut tape = Tape::new();
        let token = [0.5, -1.0, 2.0, 0.0, 3.0, 1.5];
        let data: Vec<f64> = token.iter().copied().cycle().take(7 * 6).collect();
        let z = tape.constant(Tensor::new([7, 6], data).unwrap());
        let out = head.forward(&mut tape, &store, z, 1).unwrap();
        for (a, b) in tape.value(out.pooled).data().iter().zip(token) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn heads_are_separate() {
        let (store, head, mut rng) = setup(3);
        let zin = Tensor::randn([8, 6], 1.0, &mut rng);
        let run = |store: &ParamStore<f64>| {
            let mut tape = Tape::new();
            let z = tape.constant(zin.clone());
            let out = head.forward(&mut tape, store, z, 2).unwrap();
            (tape.value(out.logits_arms2).clone(), tape.value(out.logits_cfh).clone())
        };
        let (a0, c0) = run(&store);
        let mut zeroed = store.clone();
        zeroed.get_mut(head.arms2.w).value = Tensor::zeros([6, 2]);
        let (a1, c1) = run(&zeroed);
        assert_ne!(a0, a1);
        assert_eq!(c0, c1);
    }

    #[test]
    fn composition_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::scalar(1.0));
        let c = tape.constant(Tensor::scalar(2.0));
        let m = tape.constant(Tensor::scalar(3.0));
        let l = compose_loss(&mut tape, a, c, Some(m), DEFAULT_ALPHA).unwrap();
        assert_eq!(l.total, 1.0 + 2.0 + 0.001 * 3.0);
        assert!((l.total - 3.003).abs() < 1e-15);
        assert!(compose_loss(&mut tape, a, c, Some(m), -1.0).is_err());
        assert_eq!(compose_loss(&mut tape, a, c, None, 0.5).unwrap().total, 3.0);
    }

    #[test]
    fn labels_must_be_binary() {
        let (store, head, mut rng) = setup(3);
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::randn([4, 6], 1.0, &mut rng));
        let out = head.forward(&mut tape, &store, z, 2).unwrap();
        let rec = Tensor::zeros([2, 3]);
        assert!(matches!(total_loss(&mut tape, &out, &[0, 2], &[0, 1], Some(&rec), 0.001), Err(Error::Argument(_))));
        assert!(matches!(total_loss(&mut tape, &out, &[0, 1], &[3, 1], Some(&rec), 0.001), Err(Error::Argument(_))));
        assert!(total_loss(&mut tape, &out, &[0, 1], &[1, 1], Some(&rec), 0.001).is_ok());
    }

    fn rra_grads(alpha: f64, perm: bool) -> (f64, Vec<f64>) {
        let (mut store, head, mut rng) = setup(3);
        let zin = Tensor::randn([3 * 4, 6], 1.0, &mut rng);
        let rec = Tensor::new([3, 3], (0..9).map(|i| i as f64 / 9.0).collect()).unwrap();
        let (mut ya, mut yc) = (vec![0, 1, 1], vec![1, 0, 1]);
        let (mut zin, mut rec) = (zin, rec);
        if perm {
            // Reverse sample order.
            let rows = |t: &Tensor<f64>, per: usize| -> Vec<f64> {
                t.data().chunks(per * t.cols()).rev().flatten().copied().collect()
            };
            zin = Tensor::new([12, 6], rows(&zin, 4)).unwrap();
            rec = Tensor::new([3, 3], rows(&rec, 1)).unwrap();
            ya.reverse();
            yc.reverse();
        }
        let mut tape = Tape::new();
        let z = tape.constant(zin);
        let out = head.forward(&mut tape, &store, z, 3).unwrap();
        let l = total_loss(&mut tape, &out, &ya, &yc, Some(&rec), alpha).unwrap();
        assert_eq!(l.total, l.ce_arms2 + l.ce_cfh + alpha * l.mse_record);
        tape.backward(l.var).unwrap();
        store.accumulate_grads(&tape);
        let rra = head.rra.as_ref().unwrap();
        let g = [rra.fc1.w, rra.fc1.b, rra.fc2.w, rra.fc2.b]
            .iter()
            .flat_map(|&id| store.get(id).grad.data().to_vec())
            .collect();
        (l.total, g)
    }

    #[test]
    fn reconstruction_gradient_scales_with_alpha() {
        let (_, g0) = rra_grads(0.0, false);
        assert!(g0.iter().all(|&g| g == 0.0));
        let (_, g1) = rra_grads(0.001, false);
        let (_, g2) = rra_grads(0.004, false);
        assert!(g1.iter().any(|&g| g != 0.0));
        for (a, b) in g1.iter().zip(&g2) {
            assert!((4.0 * a - b).abs() <= 1e-12 * b.abs().max(1e-30));
        }
    }

    #[test]
    fn loss_is_batch_permutation_invariant() {
        let (a, _) = rra_grads(0.001, false);
        let (b, _) = rra_grads(0.001, true);
        assert!((a - b).abs() < 1e-12);
    }
}
