//! The dual-predictive attractor-refinement decoder.
//!
//! Per prediction, over the newest `t_seq` envelope frames:
//!
//! 1. every frame is linearly encoded, `z = W_enc x` (no bias);
//! 2. one shared two-layer scorer rates each lag `j` from
//!    `[z[i-j]; z[i]]`, a softmax turns the scores into `α`, and the context
//!    is `z_atn = Σ_j α_j z[i-j]`;
//! 3. the context is expanded, `e = tanh(W_exp z_atn + b)`;
//! 4. each finger's attractor head scores the discrete angle states, and the
//!    coarse estimate is the probability-weighted mean state;
//! 5. each finger's refinement head adds an unbounded correction.
//!
//! The same arithmetic runs tape-free ([`forward`], [`StreamState`]) for
//! inference and on a [`Tape`] ([`forward_on_tape`]) for training. Both call
//! the kernels in [`crate::autodiff::kernels`] in the same order, so their
//! outputs agree bit for bit.

pub mod forward;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

pub use forward::{
    attention_context, attention_score, attractor_head, encode, expand, forward, forward_frames,
    forward_on_tape, refine, streaming_step, ForwardTrace, StreamState, TapeForward,
};

/// What the refinement heads read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinementInput {
    /// The attention context vector (parallel branch).
    Context,
    /// The expansion layer output.
    Expansion,
}

/// Architecture dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DparsConfig {
    pub c_in: usize,
    pub d_enc: usize,
    pub t_seq: usize,
    pub h_atn: usize,
    pub d_exp: usize,
    pub h_attr: usize,
    pub n_states: usize,
    pub angle_min: f64,
    pub angle_max: f64,
    pub n_fingers: usize,
    pub h_refn: usize,
    pub refinement_input: RefinementInput,
}

impl Default for DparsConfig {
    fn default() -> Self {
        DparsConfig {
            c_in: 64,
            d_enc: 10,
            t_seq: 20,
            h_atn: 10,
            d_exp: 24,
            h_attr: 20,
            n_states: 11,
            angle_min: 90.0,
            angle_max: 180.0,
            n_fingers: 6,
            h_refn: 16,
            refinement_input: RefinementInput::Context,
        }
    }
}

impl DparsConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("c_in", self.c_in),
            ("d_enc", self.d_enc),
            ("t_seq", self.t_seq),
            ("h_atn", self.h_atn),
            ("d_exp", self.d_exp),
            ("h_attr", self.h_attr),
            ("n_fingers", self.n_fingers),
            ("h_refn", self.h_refn),
        ];
        if let Some((name, _)) = widths.iter().find(|(_, w)| *w == 0) {
            return Err(Error::Model(format!("{name} must be >= 1")));
        }
        if self.n_states < 2 {
            return Err(Error::Model("n_states must be >= 2".into()));
        }
        if !(self.angle_min.is_finite() && self.angle_max.is_finite() && self.angle_min < self.angle_max)
        {
            return Err(Error::Model(format!(
                "angle range [{}, {}] is empty",
                self.angle_min, self.angle_max
            )));
        }
        Ok(())
    }

    /// The attractor set: `n_states` evenly spaced angles, endpoints included.
    pub fn states(&self) -> Vec<f64> {
        let step = (self.angle_max - self.angle_min) / (self.n_states - 1) as f64;
        (0..self.n_states)
            .map(|k| {
                if k == self.n_states - 1 {
                    self.angle_max
                } else {
                    self.angle_min + step * k as f64
                }
            })
            .collect()
    }

    pub(crate) fn refn_in(&self) -> usize {
        match self.refinement_input {
            RefinementInput::Context => self.d_enc,
            RefinementInput::Expansion => self.d_exp,
        }
    }
}

/// Parameter counts per stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub encoder: usize,
    pub attention: usize,
    pub expansion: usize,
    pub attractor: usize,
    pub refinement: usize,
    pub total: usize,
}

/// Closed-form parameter count of a dense model.
pub fn param_count(config: &DparsConfig) -> ParamCount {
    let c = config;
    let encoder = c.c_in * c.d_enc;
    let attention = 2 * c.d_enc * c.h_atn + c.h_atn + c.h_atn + 1;
    let expansion = c.d_enc * c.d_exp + c.d_exp;
    let attractor = c.n_fingers * (c.d_exp * c.h_attr + c.h_attr + c.h_attr * c.n_states + c.n_states);
    let refinement = c.n_fingers * (c.refn_in() * c.h_refn + c.h_refn + c.h_refn + 1);
    ParamCount {
        encoder,
        attention,
        expansion,
        attractor,
        refinement,
        total: encoder + attention + expansion + attractor + refinement,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub enc: ParamId,
    pub atn1: Dense,
    pub atn2: Dense,
    pub exp: Dense,
    pub attr1: Vec<Dense>,
    pub attr2: Vec<Dense>,
    pub refn1: Vec<Dense>,
    pub refn2: Vec<Dense>,
}

/// Every learnable array, plus the per-finger attractor supports.
#[derive(Debug, Clone, PartialEq)]
pub struct DparsParams {
    config: DparsConfig,
    store: ParamStore,
    layout: Layout,
    /// Indices into `config.states()` each finger's head scores; all states
    /// unless the heads were pruned.
    supports: Vec<Vec<usize>>,
    /// `states()[supports[c]]`, cached.
    support_values: Vec<Vec<f64>>,
}

/// Names and shapes of every parameter array, in storage order.
pub fn param_shapes(config: &DparsConfig, supports: &[Vec<usize>]) -> Vec<(String, Vec<usize>)> {
    let c = config;
    let mut v = vec![
        ("enc.w".to_string(), vec![c.d_enc, c.c_in]),
        ("atn.w1".to_string(), vec![c.h_atn, 2 * c.d_enc]),
        ("atn.b1".to_string(), vec![c.h_atn]),
        ("atn.w2".to_string(), vec![1, c.h_atn]),
        ("atn.b2".to_string(), vec![1]),
        ("exp.w".to_string(), vec![c.d_exp, c.d_enc]),
        ("exp.b".to_string(), vec![c.d_exp]),
    ];
    for (f, support) in supports.iter().enumerate().take(c.n_fingers) {
        v.push((format!("attr{f}.w1"), vec![c.h_attr, c.d_exp]));
        v.push((format!("attr{f}.b1"), vec![c.h_attr]));
        v.push((format!("attr{f}.w2"), vec![support.len(), c.h_attr]));
        v.push((format!("attr{f}.b2"), vec![support.len()]));
    }
    for f in 0..c.n_fingers {
        v.push((format!("refn{f}.w1"), vec![c.h_refn, c.refn_in()]));
        v.push((format!("refn{f}.b1"), vec![c.h_refn]));
        v.push((format!("refn{f}.w2"), vec![1, c.h_refn]));
        v.push((format!("refn{f}.b2"), vec![1]));
    }
    v
}

impl DparsParams {
    /// All-zero parameters over the full attractor set.
    pub fn zeros(config: &DparsConfig) -> Result<Self> {
        config.validate()?;
        let supports = vec![(0..config.n_states).collect::<Vec<_>>(); config.n_fingers];
        let tensors = param_shapes(config, &supports)
            .into_iter()
            .map(|(name, shape)| (name, Tensor::zeros(&shape)))
            .collect();
        Self::from_tensors(config.clone(), supports, tensors)
    }

    /// Weights uniform in `±1/√fan_in` per layer, biases zero, from `seed`.
    pub fn init(config: &DparsConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for param in p.store.iter_mut() {
            if param.value.shape().len() == 2 {
                let fan_in = param.value.shape()[1];
                let bound = 1.0 / (fan_in as f64).sqrt();
                for v in param.value.data_mut() {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
        Ok(p)
    }

    /// Builds from named tensors; names and shapes must match
    /// [`param_shapes`] exactly and in order.
    pub fn from_tensors(
        config: DparsConfig,
        supports: Vec<Vec<usize>>,
        tensors: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        config.validate()?;
        if supports.len() != config.n_fingers {
            return Err(Error::Model(format!(
                "{} supports for {} fingers",
                supports.len(),
                config.n_fingers
            )));
        }
        for (f, s) in supports.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Model(format!("finger {f} has an empty attractor support")));
            }
            if s.windows(2).any(|w| w[0] >= w[1]) || s.iter().any(|&k| k >= config.n_states) {
                return Err(Error::Model(format!(
                    "finger {f} support {s:?} must be strictly increasing state indices < {}",
                    config.n_states
                )));
            }
        }
        let expected = param_shapes(&config, &supports);
        if expected.len() != tensors.len() {
            return Err(Error::Model(format!(
                "expected {} parameter arrays, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        let mut store = ParamStore::new();
        for ((ename, eshape), (name, t)) in expected.iter().zip(tensors) {
            if *ename != name || eshape.as_slice() != t.shape() {
                return Err(Error::Model(format!(
                    "parameter {name} {:?} does not match expected {ename} {eshape:?}",
                    t.shape()
                )));
            }
            store.add(name, t);
        }
        let layout = Self::layout(&config, &store)?;
        let states = config.states();
        let support_values = supports
            .iter()
            .map(|s| s.iter().map(|&k| states[k]).collect())
            .collect();
        Ok(DparsParams {
            config,
            store,
            layout,
            supports,
            support_values,
        })
    }

    fn layout(config: &DparsConfig, store: &ParamStore) -> Result<Layout> {
        let id = |name: &str| {
            store
                .find(name)
                .ok_or_else(|| Error::Model(format!("missing parameter {name}")))
        };
        let dense = |prefix: &str, w: &str, b: &str| -> Result<Dense> {
            Ok(Dense {
                w: id(&format!("{prefix}.{w}"))?,
                b: id(&format!("{prefix}.{b}"))?,
            })
        };
        let per_finger = |kind: &str, w: &str, b: &str| -> Result<Vec<Dense>> {
            (0..config.n_fingers)
                .map(|f| dense(&format!("{kind}{f}"), w, b))
                .collect()
        };
        Ok(Layout {
            enc: id("enc.w")?,
            atn1: dense("atn", "w1", "b1")?,
            atn2: dense("atn", "w2", "b2")?,
            exp: Dense {
                w: id("exp.w")?,
                b: id("exp.b")?,
            },
            attr1: per_finger("attr", "w1", "b1")?,
            attr2: per_finger("attr", "w2", "b2")?,
            refn1: per_finger("refn", "w1", "b1")?,
            refn2: per_finger("refn", "w2", "b2")?,
        })
    }

    pub fn config(&self) -> &DparsConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub(crate) fn layout_ref(&self) -> &Layout {
        &self.layout
    }

    pub fn supports(&self) -> &[Vec<usize>] {
        &self.supports
    }

    /// Angle values of finger `c`'s attractor states.
    pub fn support_values(&self, finger: usize) -> &[f64] {
        &self.support_values[finger]
    }

    pub fn is_pruned(&self) -> bool {
        self.supports.iter().any(|s| s.len() != self.config.n_states)
    }

    pub(crate) fn value(&self, id: ParamId) -> &[f64] {
        self.store.get(id).value.data()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.store.find(name).map(|id| &self.store.get(id).value)
    }

    /// Mutable access to a named array, for experiments and tests.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let id = self.store.find(name)?;
        Some(&mut self.store.get_mut(id).value)
    }

    /// Named tensors in storage order.
    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        self.store
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Keeps only the listed states in each finger's head. Rows of the head
    /// output layer outside the support are dropped and the softmax then
    /// normalizes over what remains.
    pub fn with_supports(&self, supports: &[Vec<usize>]) -> Result<Self> {
        if supports.len() != self.config.n_fingers {
            return Err(Error::Model(format!(
                "{} supports for {} fingers",
                supports.len(),
                self.config.n_fingers
            )));
        }
        let mut tensors = Vec::new();
        for p in self.store.iter() {
            let finger = p
                .name
                .strip_prefix("attr")
                .and_then(|rest| rest.split_once('.'))
                .and_then(|(f, field)| f.parse::<usize>().ok().map(|f| (f, field)));
            let t = match finger {
                Some((f, field @ ("w2" | "b2"))) => {
                    let old = &self.supports[f];
                    let cols = if field == "w2" { p.value.shape()[1] } else { 1 };
                    let mut data = Vec::new();
                    for &k in &supports[f] {
                        let row = old.iter().position(|&o| o == k).ok_or_else(|| {
                            Error::Model(format!(
                                "state {k} is not in finger {f}'s current support"
                            ))
                        })?;
                        data.extend_from_slice(&p.value.data()[row * cols..(row + 1) * cols]);
                    }
                    if data.is_empty() {
                        return Err(Error::Model(format!("finger {f} support is empty")));
                    }
                    if field == "w2" {
                        Tensor::matrix(supports[f].len(), cols, data)
                    } else {
                        Tensor::vector(data)
                    }
                }
                _ => p.value.clone(),
            };
            tensors.push((p.name.clone(), t));
        }
        Self::from_tensors(self.config.clone(), supports.to_vec(), tensors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> DparsConfig {
        DparsConfig {
            c_in: 4,
            d_enc: 2,
            t_seq: 3,
            h_atn: 3,
            d_exp: 4,
            h_attr: 3,
            n_states: 5,
            angle_min: 90.0,
            angle_max: 180.0,
            n_fingers: 2,
            h_refn: 3,
            refinement_input: RefinementInput::Context,
        }
    }

    #[test]
    fn default_states_are_nine_degrees_apart() {
        let s = DparsConfig::default().states();
        assert_eq!(s.len(), 11);
        assert_eq!(s[0], 90.0);
        assert_eq!(s[10], 180.0);
        for (k, v) in s.iter().enumerate() {
            assert!((v - (90.0 + 9.0 * k as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn tiny_param_count_is_135() {
        assert_eq!(param_count(&tiny()).total, 135);
        let p = DparsParams::zeros(&tiny()).unwrap();
        assert_eq!(p.store().num_scalars(), 135);
    }

    #[test]
    fn default_param_count_brackets_table_value() {
        let n = param_count(&DparsConfig::default()).total;
        assert_eq!(n, 6669);
        assert!((5500..=8200).contains(&n));
    }

    #[test]
    fn zero_widths_are_rejected() {
        let mut c = tiny();
        c.h_atn = 0;
        assert!(DparsParams::zeros(&c).is_err());
        let mut c = tiny();
        c.n_states = 1;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.angle_min = 180.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let c = DparsConfig::default();
        let a = DparsParams::init(&c, 7).unwrap();
        let b = DparsParams::init(&c, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, DparsParams::init(&c, 8).unwrap());
        assert!(a.get("enc.w").unwrap().data().iter().all(|v| v.abs() <= 0.125));
        for p in a.store().iter() {
            if p.value.shape().len() == 1 {
                assert!(p.value.data().iter().all(|&v| v == 0.0), "{}", p.name);
            }
        }
    }

    #[test]
    fn support_selection_drops_rows() {
        let p = DparsParams::init(&tiny(), 1).unwrap();
        let pruned = p.with_supports(&[vec![0, 4], vec![2]]).unwrap();
        assert_eq!(pruned.get("attr0.w2").unwrap().shape(), &[2, 3]);
        assert_eq!(pruned.get("attr1.b2").unwrap().shape(), &[1]);
        assert_eq!(pruned.support_values(0), &[90.0, 180.0]);
        let w = p.get("attr0.w2").unwrap().data();
        assert_eq!(&pruned.get("attr0.w2").unwrap().data()[3..6], &w[12..15]);
        assert!(p.with_supports(&[vec![], vec![1]]).is_err());
    }
}
