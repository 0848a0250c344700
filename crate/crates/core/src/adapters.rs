//! Domain Shifters and the baseline adapter mechanisms.
//!
//! Every adapter starts from a zero-valued residual path, so attaching one
//! leaves the forward pass bit-identical until its parameters move.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{NumericsError, Result, Scalar, Tensor};

/// Visual domain co-variate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DomainId {
    Real,
    Syn,
}

impl DomainId {
    pub fn label(self) -> &'static str {
        match self {
            DomainId::Real => "real",
            DomainId::Syn => "syn",
        }
    }
}

/// Per-block low-rank domain residual: X + W_left (W_right e_domain),
/// broadcast identically to every token.
pub struct DomainShifter<F: Scalar> {
    pub e_syn: Tensor<F>,  // [d, 1]
    pub e_real: Tensor<F>, // [d, 1]
    pub w_left: Tensor<F>, // [d, r]
    pub w_right: Tensor<F>, // [r, d]
    pub d: usize,
    pub r: usize,
}

impl<F: Scalar> DomainShifter<F> {
    /// e and W_left start small, W_right starts at zero, so the residual is
    /// exactly zero and training begins at the frozen base model's behavior.
    pub fn new(d: usize, r: usize, rng: &mut impl Rng) -> Result<Self> {
        if r > d / 4 {
            return Err(NumericsError::Contract {
                op: "DomainShifter::new",
                msg: format!("rank {} too large for width {} (need r <= d/4)", r, d),
            });
        }
        Ok(DomainShifter {
            e_syn: Tensor::randn(&[d, 1], 0.02, rng).requires_grad(true),
            e_real: Tensor::randn(&[d, 1], 0.02, rng).requires_grad(true),
            w_left: Tensor::randn(&[d, r], 0.02, rng).requires_grad(true),
            w_right: Tensor::zeros(&[r, d]).requires_grad(true),
            d,
            r,
        })
    }

    /// The domain residual as a [1, d] row vector.
    pub fn residual(&self, domain: DomainId) -> Result<Tensor<F>> {
        let e = match domain {
            DomainId::Real => &self.e_real,
            DomainId::Syn => &self.e_syn,
        };
        self.w_left.matmul(&self.w_right.matmul(e)?)?.reshape(&[1, self.d])
    }

    /// X~ = X + W_left W_right e_domain for every token row of X.
    pub fn shift(&self, x: &Tensor<F>, domain: DomainId) -> Result<Tensor<F>> {
        if x.shape().len() != 2 || x.shape()[1] != self.d {
            return Err(NumericsError::ShapeMismatch {
                op: "DomainShifter::shift",
                lhs: x.shape().to_vec(),
                rhs: vec![self.d],
            });
        }
        x.add_row(&self.residual(domain)?)
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<F>)>) {
        out.push((format!("{prefix}.e_syn"), self.e_syn.clone()));
        out.push((format!("{prefix}.e_real"), self.e_real.clone()));
        out.push((format!("{prefix}.w_left"), self.w_left.clone()));
        out.push((format!("{prefix}.w_right"), self.w_right.clone()));
    }
}

/// Per-block domain assignment: blocks [0, prefix] run SYN, the rest `base`.
/// With no prefix every block runs `base`.
pub fn resolve_plan(base: DomainId, reassigned_prefix: Option<usize>, n_blocks: usize) -> Result<Vec<DomainId>> {
    if let Some(p) = reassigned_prefix {
        if p >= n_blocks {
            return Err(NumericsError::Contract {
                op: "resolve_plan",
                msg: format!("prefix {} out of range for {} blocks", p, n_blocks),
            });
        }
    }
    Ok((0..n_blocks)
        .map(|b| match reassigned_prefix {
            Some(p) if b <= p => DomainId::Syn,
            _ => base,
        })
        .collect())
}

/// Baseline adapter families, each behind the same attach/detach contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdapterKind {
    /// Low-rank deltas on the attention projections (q, k, v, o).
    Lora,
    /// Low-rank residual map on block inputs.
    LinearAdapter,
    /// Low-rank residual projection after each block body.
    SpatialAdapter,
    /// 1-D learned vector concatenated to the timestep embedding.
    DomainSwitcher,
}

impl AdapterKind {
    pub fn label(self) -> &'static str {
        match self {
            AdapterKind::Lora => "lora",
            AdapterKind::LinearAdapter => "linear_adapter",
            AdapterKind::SpatialAdapter => "spatial_adapter",
            AdapterKind::DomainSwitcher => "domain_switcher",
        }
    }
}

/// One low-rank delta `x . a . b` with `b` zero-initialized.
pub struct LowRankDelta<F: Scalar> {
    pub a: Tensor<F>, // [d_in, r]
    pub b: Tensor<F>, // [r, d_out]
}

impl<F: Scalar> LowRankDelta<F> {
    pub fn new(d_in: usize, d_out: usize, r: usize, rng: &mut impl Rng) -> Self {
        LowRankDelta {
            a: Tensor::randn(&[d_in, r], 0.02, rng).requires_grad(true),
            b: Tensor::zeros(&[r, d_out]).requires_grad(true),
        }
    }

    pub fn apply(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        x.matmul(&self.a)?.matmul(&self.b)
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<F>)>) {
        out.push((format!("{prefix}.a"), self.a.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

/// LoRA deltas for the four attention projections of one block.
pub struct BlockLora<F: Scalar> {
    pub q: LowRankDelta<F>,
    pub k: LowRankDelta<F>,
    pub v: LowRankDelta<F>,
    pub o: LowRankDelta<F>,
}

impl<F: Scalar> BlockLora<F> {
    pub fn new(d: usize, r: usize, rng: &mut impl Rng) -> Self {
        BlockLora {
            q: LowRankDelta::new(d, d, r, rng),
            k: LowRankDelta::new(d, d, r, rng),
            v: LowRankDelta::new(d, d, r, rng),
            o: LowRankDelta::new(d, d, r, rng),
        }
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<F>)>) {
        self.q.named_params(&format!("{prefix}.q"), out);
        self.k.named_params(&format!("{prefix}.k"), out);
        self.v.named_params(&format!("{prefix}.v"), out);
        self.o.named_params(&format!("{prefix}.o"), out);
    }
}

/// Wonder3D-style switcher: one learned vector per domain, concatenated to
/// the sinusoidal timestep embedding before the conditioning MLP.
pub struct DomainSwitcher<F: Scalar> {
    pub vec_real: Tensor<F>, // [dim]
    pub vec_syn: Tensor<F>,  // [dim]
    pub dim: usize,
}

impl<F: Scalar> DomainSwitcher<F> {
    pub fn new(dim: usize, rng: &mut impl Rng) -> Self {
        DomainSwitcher {
            vec_real: Tensor::randn(&[dim], 0.02, rng).requires_grad(true),
            vec_syn: Tensor::randn(&[dim], 0.02, rng).requires_grad(true),
            dim,
        }
    }

    pub fn vector(&self, domain: DomainId) -> &Tensor<F> {
        match domain {
            DomainId::Real => &self.vec_real,
            DomainId::Syn => &self.vec_syn,
        }
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<F>)>) {
        out.push((format!("{prefix}.vec_real"), self.vec_real.clone()));
        out.push((format!("{prefix}.vec_syn"), self.vec_syn.clone()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_from;

    #[test]
    fn shift_identity_at_zero_embeddings() {
        let mut rng = rng_from(1);
        let s = DomainShifter::<f64>::new(16, 4, &mut rng).unwrap();
        s.e_syn.set_data(&vec![0.0; 16]);
        s.e_real.set_data(&vec![0.0; 16]);
        let x = Tensor::randn(&[5, 16], 1.0, &mut rng);
        let y = s.shift(&x, DomainId::Real).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn shift_hand_case() {
        // d=4, r=1, W_left = [1,0,0,0]^T, W_right = [1,1,1,1], e = [1,1,1,1]
        // residual = [4, 0, 0, 0].
        let mut rng = rng_from(2);
        let s = DomainShifter::<f64>::new(4, 1, &mut rng).unwrap();
        s.w_left.set_data(&[1.0, 0.0, 0.0, 0.0]);
        s.w_right.set_data(&[1.0, 1.0, 1.0, 1.0]);
        s.e_syn.set_data(&[1.0, 1.0, 1.0, 1.0]);
        let x = Tensor::zeros(&[3, 4]);
        let y = s.shift(&x, DomainId::Syn).unwrap();
        for row in 0..3 {
            assert_eq!(&y.data()[row * 4..(row + 1) * 4], &[4.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn shift_rows_identical() {
        let mut rng = rng_from(3);
        let s = DomainShifter::<f64>::new(16, 4, &mut rng).unwrap();
        s.w_right.set_data(&Tensor::<f64>::randn(&[4, 16], 0.5, &mut rng).data());
        let row = Tensor::<f64>::randn(&[1, 16], 1.0, &mut rng).data();
        let x = Tensor::from_vec(&[7, 16], row.repeat(7)).unwrap();
        let y = s.shift(&x, DomainId::Syn).unwrap();
        let yd = y.data();
        for r in 1..7 {
            assert_eq!(&yd[r * 16..(r + 1) * 16], &yd[0..16], "identical rows must shift identically");
        }
    }

    #[test]
    fn shift_width_mismatch_errors() {
        let mut rng = rng_from(4);
        let s = DomainShifter::<f64>::new(16, 4, &mut rng).unwrap();
        let x = Tensor::<f64>::zeros(&[3, 8]);
        assert!(s.shift(&x, DomainId::Real).is_err());
    }

    #[test]
    fn rank_cap_enforced() {
        let mut rng = rng_from(5);
        assert!(DomainShifter::<f64>::new(16, 8, &mut rng).is_err());
    }

    #[test]
    fn resolve_plan_cases() {
        assert_eq!(
            resolve_plan(DomainId::Real, None, 4).unwrap(),
            vec![DomainId::Real; 4]
        );
        let p = resolve_plan(DomainId::Real, Some(2), 12).unwrap();
        assert_eq!(&p[..3], &[DomainId::Syn; 3]);
        assert_eq!(&p[3..], &[DomainId::Real; 9]);
        // Reassignment over an already-synthetic base is idempotent.
        assert_eq!(
            resolve_plan(DomainId::Syn, Some(3), 6).unwrap(),
            vec![DomainId::Syn; 6]
        );
        assert!(resolve_plan(DomainId::Real, Some(12), 12).is_err());
    }

    #[test]
    fn swapping_embeddings_and_labels_is_invariant() {
        let mut rng = rng_from(6);
        let s = DomainShifter::<f64>::new(16, 4, &mut rng).unwrap();
        s.w_right.set_data(&Tensor::<f64>::randn(&[4, 16], 0.5, &mut rng).data());
        let x = Tensor::randn(&[5, 16], 1.0, &mut rng);
        let before = s.shift(&x, DomainId::Real).unwrap().data();
        let (er, es) = (s.e_real.data(), s.e_syn.data());
        s.e_real.set_data(&es);
        s.e_syn.set_data(&er);
        let after = s.shift(&x, DomainId::Syn).unwrap().data();
        assert_eq!(before, after);
    }
}
