//! Conditional low-rank adapters.
//!
//! An adapter on layer `j` contributes `B(A·input_j)` to that layer's
//! pre-activation, i.e. `ΔW = BA` without ever materialising the sum
//! `W + ΔW`. It is applied to a sample only when the detector score for the
//! adapter's attribute strictly exceeds the threshold; several triggered
//! adapters on the same layer add up.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{dim, invalid, FairNetError, Result};
use crate::model::{BaseModel, ForwardTrace};
use crate::numerics::Matrix;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    target_layer: usize,
    rank: usize,
    /// `r × k`
    a: Matrix,
    /// `d × r`
    b: Matrix,
}

/// Gradient buffers shaped like an adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad {
    pub a: Matrix,
    pub b: Matrix,
}

impl AdapterGrad {
    pub fn for_adapter(adapter: &LoraAdapter) -> Self {
        Self {
            a: Matrix::zeros(adapter.a.rows(), adapter.a.cols()),
            b: Matrix::zeros(adapter.b.rows(), adapter.b.cols()),
        }
    }

    pub fn zero(&mut self) {
        self.a.fill(0.0);
        self.b.fill(0.0);
    }

    pub fn flatten(&self) -> Vec<f64> {
        [self.a.values(), self.b.values()].concat()
    }

    pub fn add_assign(&mut self, other: &AdapterGrad) {
        for (x, y) in self.a.values_mut().iter_mut().zip(other.a.values()) {
            *x += y;
        }
        for (x, y) in self.b.values_mut().iter_mut().zip(other.b.values()) {
            *x += y;
        }
    }
}

/// `A` uniform (symmetric fan-in/fan-out bound), `B = 0`, so `ΔW = 0` until
/// trained. `layer_dims` is `(d, k)`: outputs and inputs of the target layer.
pub fn init_adapter(
    target_layer: usize,
    layer_dims: (usize, usize),
    rank: usize,
    seed: u64,
) -> Result<LoraAdapter> {
    let (d, k) = layer_dims;
    if rank == 0 || 2 * rank > d.min(k) {
        return Err(invalid(format!(
            "rank {rank} must satisfy 1 <= r <= min({d}, {k}) / 2"
        )));
    }
    if target_layer == 0 {
        return Err(invalid("adapter layers are 1-based"));
    }
    let mut rng = SplitMix64::new(seed);
    Ok(LoraAdapter {
        target_layer,
        rank,
        a: Matrix::xavier_uniform(rank, k, &mut rng),
        b: Matrix::zeros(d, rank),
    })
}

impl LoraAdapter {
    pub fn from_parts(target_layer: usize, a: Matrix, b: Matrix) -> Result<Self> {
        if a.rows() != b.cols() {
            return Err(dim(format!("A is {:?}, B is {:?}", a.shape(), b.shape())));
        }
        let rank = a.rows();
        if rank == 0 || 2 * rank > b.rows().min(a.cols()) {
            return Err(invalid(format!(
                "rank {rank} too large for {}x{}",
                b.rows(),
                a.cols()
            )));
        }
        Ok(Self {
            target_layer,
            rank,
            a,
            b,
        })
    }

    pub fn target_layer(&self) -> usize {
        self.target_layer
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    /// `(d, k)` of the adapted layer.
    pub fn layer_dims(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }

    pub fn delta_weight(&self) -> Matrix {
        self.b.matmul(&self.a).expect("adapter factors chain")
    }

    /// `B(A·input)`.
    pub fn apply(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.b.matvec(&self.a.matvec(input)?)
    }

    /// Accumulates `dA`, `dB` given `dL/dpre` and returns the adapter's
    /// share of `dL/dinput`.
    pub fn backward(
        &self,
        input: &[f64],
        dpre: &[f64],
        grad: &mut AdapterGrad,
    ) -> Result<Vec<f64>> {
        let low = self.a.matvec(input)?;
        let back = self.b.t_matvec(dpre)?;
        grad.b.add_outer(1.0, dpre, &low);
        grad.a.add_outer(1.0, &back, input);
        self.a.t_matvec(&back)
    }

    pub fn step(&mut self, lr: f64, grad: &AdapterGrad) {
        self.a.step(lr, &grad.a);
        self.b.step(lr, &grad.b);
    }

    pub fn param_count(&self) -> usize {
        let (d, k) = self.layer_dims();
        self.rank * (d + k)
    }

    /// `2rk` for `Ax`, `2dr` for `B(Ax)`, `d` to add it to the pre-activation.
    pub fn flops_per_sample(&self) -> usize {
        let (d, k) = self.layer_dims();
        2 * self.rank * k + 2 * d * self.rank + d
    }

    pub fn params_flat(&self) -> Vec<f64> {
        [self.a.values(), self.b.values()].concat()
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        let na = self.a.values().len();
        if params.len() != na + self.b.values().len() {
            return Err(dim("adapter flat parameter length"));
        }
        self.a.values_mut().copy_from_slice(&params[..na]);
        self.b.values_mut().copy_from_slice(&params[na..]);
        Ok(())
    }

    pub fn check_against(&self, model: &BaseModel) -> Result<()> {
        model.check_layer(self.target_layer)?;
        let spec = model.layer(self.target_layer).spec;
        if self.layer_dims() != (spec.out_dim, spec.in_dim) {
            return Err(dim(format!(
                "adapter {:?} does not fit layer {} ({}x{})",
                self.layer_dims(),
                self.target_layer,
                spec.out_dim,
                spec.in_dim
            )));
        }
        Ok(())
    }
}

/// An adapter serving one sensitive attribute; its detector is the one
/// registered for the same attribute id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterUnit {
    pub attribute: usize,
    pub adapter: LoraAdapter,
}

/// Units whose attribute score strictly exceeds `tau`.
pub fn triggered<'a>(
    units: &'a [AdapterUnit],
    scores: &BTreeMap<usize, f64>,
    tau: f64,
) -> Result<Vec<&'a LoraAdapter>> {
    let mut out = Vec::new();
    for unit in units {
        let p = scores.get(&unit.attribute).ok_or_else(|| {
            FairNetError::MissingArtifact(format!(
                "no detector score for attribute {}",
                unit.attribute
            ))
        })?;
        if *p > tau {
            out.push(&unit.adapter);
        }
    }
    Ok(out)
}

/// Forward pass with layer `j` using `W_j + Σ ΔW` over the units whose
/// detector fired. Base weights are never touched.
pub fn conditional_forward(
    model: &BaseModel,
    units: &[AdapterUnit],
    x: &[f64],
    scores: &BTreeMap<usize, f64>,
    tau: f64,
) -> Result<ForwardTrace> {
    for unit in units {
        unit.adapter.check_against(model)?;
    }
    let active = triggered(units, scores, tau)?;
    model.forward_adapted(x, &active)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, max_relative_error, Activation};
    use nalgebra::DMatrix;

    fn model() -> BaseModel {
        BaseModel::init(6, &[8, 8], 2, Activation::Tanh, 21).unwrap()
    }

    fn trained_like(seed: u64, layer: usize) -> LoraAdapter {
        let mut a = init_adapter(layer, (8, if layer == 1 { 6 } else { 8 }), 2, seed).unwrap();
        let mut rng = SplitMix64::new(seed + 100);
        let n = a.b.values().len();
        let bvals: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        a.b.values_mut().copy_from_slice(&bvals);
        a
    }

    fn numerical_rank(m: &Matrix) -> (Vec<f64>, usize) {
        let dm = DMatrix::from_row_slice(m.rows(), m.cols(), m.values());
        let mut sv: Vec<f64> = dm.singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        let rank = sv.iter().filter(|v| **v > 1e-9).count();
        (sv, rank)
    }

    #[test]
    fn init_has_zero_delta_and_is_deterministic() {
        let a = init_adapter(2, (8, 8), 4, 5).unwrap();
        assert!(a.delta_weight().values().iter().all(|v| *v == 0.0));
        assert_eq!(a, init_adapter(2, (8, 8), 4, 5).unwrap());
        assert!(init_adapter(2, (8, 8), 5, 5).is_err());
        assert!(init_adapter(2, (8, 8), 0, 5).is_err());
    }

    #[test]
    fn rank_one_outer_product() {
        let a = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let ad = LoraAdapter {
            target_layer: 1,
            rank: 1,
            a,
            b,
        };
        assert_eq!(ad.delta_weight().values(), &[3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn delta_rank_is_bounded() {
        let mut rng = SplitMix64::new(8);
        for r in 1..=4 {
            let mut ad = init_adapter(1, (12, 10), r, rng.next_u64()).unwrap();
            let vals: Vec<f64> = (0..12 * r).map(|_| rng.normal()).collect();
            ad.b.values_mut().copy_from_slice(&vals);
            let (sv, rank) = numerical_rank(&ad.delta_weight());
            assert_eq!(rank, r);
            assert!(sv[r..].iter().all(|v| *v < 1e-9));
        }
    }

    #[test]
    fn no_trigger_or_zero_b_is_bitwise_base() {
        let m = model();
        let units = vec![AdapterUnit {
            attribute: 0,
            adapter: trained_like(1, 2),
        }];
        let zero = vec![AdapterUnit {
            attribute: 0,
            adapter: init_adapter(2, (8, 8), 2, 3).unwrap(),
        }];
        let mut rng = SplitMix64::new(2);
        for _ in 0..20 {
            let x: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let base = m.forward(&x).unwrap();
            let p = rng.next_f64();
            let scores = BTreeMap::from([(0, p)]);
            assert_eq!(
                conditional_forward(&m, &units, &x, &scores, 1.0).unwrap(),
                base
            );
            assert_eq!(
                conditional_forward(&m, &zero, &x, &scores, 0.0).unwrap(),
                base
            );
            // Equality with the threshold does not trigger.
            assert_eq!(
                conditional_forward(&m, &units, &x, &scores, p).unwrap(),
                base
            );
        }
    }

    #[test]
    fn two_triggered_units_sum_their_deltas() {
        let m = model();
        let u0 = trained_like(4, 2);
        let u1 = trained_like(9, 2);
        let units = vec![
            AdapterUnit {
                attribute: 0,
                adapter: u0.clone(),
            },
            AdapterUnit {
                attribute: 1,
                adapter: u1.clone(),
            },
        ];
        let scores = BTreeMap::from([(0, 0.9), (1, 0.8)]);
        let x = [0.2, -1.0, 0.5, 0.3, 0.0, 1.1];
        let both = conditional_forward(&m, &units, &x, &scores, 0.5).unwrap();

        // Fold the summed delta into layer 2 and run the plain network.
        let mut folded = m.clone();
        let dw = u0.delta_weight().add(&u1.delta_weight()).unwrap();
        let mut layers = folded.layers().to_vec();
        layers[1].weight = layers[1].weight.add(&dw).unwrap();
        folded = BaseModel::from_layers(layers).unwrap();
        let reference = folded.forward(&x).unwrap();
        for (a, b) in both.logits().iter().zip(reference.logits()) {
            assert!((a - b).abs() < 1e-12);
        }
        // Only one unit triggered.
        let one = conditional_forward(&m, &units, &x, &BTreeMap::from([(0, 0.9), (1, 0.1)]), 0.5)
            .unwrap();
        assert_eq!(one, m.forward_adapted(&x, &[&u0]).unwrap());
    }

    #[test]
    fn missing_score_is_an_error() {
        let m = model();
        let units = vec![AdapterUnit {
            attribute: 3,
            adapter: trained_like(1, 2),
        }];
        let r = conditional_forward(&m, &units, &[0.0; 6], &BTreeMap::from([(0, 0.9)]), 0.5);
        assert!(matches!(r, Err(FairNetError::MissingArtifact(_))));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let m = model();
        let units = vec![AdapterUnit {
            attribute: 0,
            adapter: init_adapter(1, (8, 8), 2, 0).unwrap(),
        }];
        assert!(
            conditional_forward(&m, &units, &[0.0; 6], &BTreeMap::from([(0, 0.9)]), 0.5).is_err()
        );
    }

    #[test]
    fn adapter_gradient_matches_fd() {
        let m = model();
        let ad = trained_like(13, 2);
        let x = [0.4, -0.2, 1.5, -0.9, 0.1, 0.7];
        let coef = [0.8, -1.3];
        let trace = m.forward_adapted(&x, &[&ad]).unwrap();
        let mut tape = m.new_tape();
        let mut grads = vec![AdapterGrad::for_adapter(&ad)];
        m.backward(
            &trace,
            &coef,
            &BTreeMap::new(),
            &[&ad],
            &mut tape,
            &mut grads,
        )
        .unwrap();
        let fd = finite_difference_gradient(
            |p| {
                let mut a2 = ad.clone();
                a2.set_params_flat(p).unwrap();
                let t = m.forward_adapted(&x, &[&a2]).unwrap();
                t.logits().iter().zip(coef).map(|(l, c)| l * c).sum()
            },
            &ad.params_flat(),
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(&grads[0].flatten(), &fd) <= 1e-6);
    }

    #[test]
    fn overhead_counts() {
        let ad = init_adapter(1, (32, 32), 4, 0).unwrap();
        assert_eq!(ad.param_count(), 256);
        assert!(ad.flops_per_sample() > 0);
    }
}
