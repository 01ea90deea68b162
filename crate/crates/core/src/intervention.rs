// SPDX-License-Identifier: MIT OR Apache-2.0

//! Interventions on concatenated attention-head outputs.
//!
//! A rotation intervention multiplies the concatenated head vector of a layer
//! by a block-diagonal matrix of 2×2 rotations, one angle per coordinate pair,
//! before the output projection. Since every block lies inside a single head
//! slice, this is the same as rotating each head's output with its own slice
//! of the angles. The rescaling baseline multiplies each head's slice by a gain
//! in `[0, 1]`.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InterventionError {
    #[error("rotation needs an even-width vector (got width {0})")]
    OddWidth(usize),
    #[error("angle count {angles} does not match vector width {width}")]
    WidthMismatch { angles: usize, width: usize },
    #[error("layer {layer} is outside the model (n_layers = {n_layers})")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("layer {layer}: expected {expected} values, got {got}")]
    LayerWidth {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("gain {value} on layer {layer} is outside [0, 1]")]
    GainOutOfRange { layer: usize, value: f64 },
    #[error("non-finite value on layer {0}")]
    NonFinite(usize),
    #[error("flat vector has length {got}, expected {expected}")]
    FlatLength { expected: usize, got: usize },
    #[error("parameter count is only defined for rotation interventions")]
    NotRotation,
    #[error("duplicate layer {0} in layer set")]
    DuplicateLayer(usize),
}

pub type Result<T> = std::result::Result<T, InterventionError>;

/// Wraps an angle into `[0, 2π)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let r = theta.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs.
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Rotates each coordinate pair `(v[2k], v[2k+1])` by `angles[k]`, in place.
pub fn rotate_in_place(angles: &[f64], v: &mut [f64]) -> Result<()> {
    if v.len() % 2 != 0 {
        return Err(InterventionError::OddWidth(v.len()));
    }
    if angles.len() * 2 != v.len() {
        return Err(InterventionError::WidthMismatch {
            angles: angles.len(),
            width: v.len(),
        });
    }
    for (pair, &theta) in v.chunks_exact_mut(2).zip(angles) {
        let (s, c) = theta.sin_cos();
        let (x, y) = (pair[0], pair[1]);
        pair[0] = c * x - s * y;
        pair[1] = s * x + c * y;
    }
    Ok(())
}

/// Block-diagonal rotation of `v`; O(d), the matrix is never built.
pub fn apply_rotation(angles: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    rotate_in_place(angles, &mut out)?;
    Ok(out)
}

/// Per-layer rotation angles, each canonicalized into `[0, 2π)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RotationConfig {
    layers: BTreeMap<usize, Vec<f64>>,
}

impl RotationConfig {
    /// All-zero angles (the identity) on every layer in `layer_set`.
    pub fn zeros(layer_set: &[usize], half_width: usize) -> Self {
        Self {
            layers: layer_set.iter().map(|&l| (l, vec![0.0; half_width])).collect(),
        }
    }

    pub fn from_layers(layers: BTreeMap<usize, Vec<f64>>) -> Result<Self> {
        let mut c = Self::default();
        for (l, angles) in layers {
            c.set_layer(l, angles)?;
        }
        Ok(c)
    }

    /// Stores wrapped angles for `layer`.
    pub fn set_layer(&mut self, layer: usize, angles: Vec<f64>) -> Result<()> {
        if angles.iter().any(|a| !a.is_finite()) {
            return Err(InterventionError::NonFinite(layer));
        }
        self.layers
            .insert(layer, angles.into_iter().map(wrap_angle).collect());
        Ok(())
    }

    pub fn layer(&self, layer: usize) -> Option<&[f64]> {
        self.layers.get(&layer).map(Vec::as_slice)
    }

    pub fn layers(&self) -> &BTreeMap<usize, Vec<f64>> {
        &self.layers
    }

    pub fn layer_set(&self) -> Vec<usize> {
        self.layers.keys().copied().collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.values().map(Vec::len).sum()
    }

    /// Concatenates the angles in ascending layer order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.layers.values().flatten().copied().collect()
    }

    /// Inverse of [`RotationConfig::to_flat`] for a given layer set.
    pub fn from_flat(layer_set: &[usize], half_width: usize, flat: &[f64]) -> Result<Self> {
        let sorted = sorted_unique(layer_set)?;
        let expected = sorted.len() * half_width;
        if flat.len() != expected {
            return Err(InterventionError::FlatLength {
                expected,
                got: flat.len(),
            });
        }
        let mut c = Self::default();
        for (l, chunk) in sorted.iter().zip(flat.chunks(half_width.max(1))) {
            c.set_layer(*l, chunk.to_vec())?;
        }
        Ok(c)
    }
}

/// Per-layer, per-head gains in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RescaleConfig {
    layers: BTreeMap<usize, Vec<f64>>,
}

impl RescaleConfig {
    pub fn ones(layer_set: &[usize], n_heads: usize) -> Self {
        Self {
            layers: layer_set.iter().map(|&l| (l, vec![1.0; n_heads])).collect(),
        }
    }

    pub fn from_layers(layers: BTreeMap<usize, Vec<f64>>) -> Result<Self> {
        for (&l, gains) in &layers {
            for &g in gains {
                if !g.is_finite() {
                    return Err(InterventionError::NonFinite(l));
                }
                if !(0.0..=1.0).contains(&g) {
                    return Err(InterventionError::GainOutOfRange { layer: l, value: g });
                }
            }
        }
        Ok(Self { layers })
    }

    pub fn layer(&self, layer: usize) -> Option<&[f64]> {
        self.layers.get(&layer).map(Vec::as_slice)
    }

    pub fn layers(&self) -> &BTreeMap<usize, Vec<f64>> {
        &self.layers
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.layers.values().flatten().copied().collect()
    }

    pub fn from_flat(layer_set: &[usize], n_heads: usize, flat: &[f64]) -> Result<Self> {
        let sorted = sorted_unique(layer_set)?;
        let expected = sorted.len() * n_heads;
        if flat.len() != expected {
            return Err(InterventionError::FlatLength {
                expected,
                got: flat.len(),
            });
        }
        let layers = sorted
            .iter()
            .zip(flat.chunks(n_heads.max(1)))
            .map(|(&l, c)| (l, c.to_vec()))
            .collect();
        Self::from_layers(layers)
    }
}

fn sorted_unique(layer_set: &[usize]) -> Result<Vec<usize>> {
    let mut sorted = layer_set.to_vec();
    sorted.sort_unstable();
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            return Err(InterventionError::DuplicateLayer(w[0]));
        }
    }
    Ok(sorted)
}

/// Which mechanism an intervention uses.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Mechanism {
    Rotation(RotationConfig),
    Rescaling(RescaleConfig),
    #[default]
    None,
}

/// A mechanism together with the layers it touches.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InterventionSpec {
    mechanism: Mechanism,
}

impl InterventionSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn rotation(config: RotationConfig) -> Self {
        Self {
            mechanism: Mechanism::Rotation(config),
        }
    }

    pub fn rescaling(config: RescaleConfig) -> Self {
        Self {
            mechanism: Mechanism::Rescaling(config),
        }
    }

    pub fn mechanism(&self) -> &Mechanism {
        &self.mechanism
    }

    /// Intervened layers in ascending order. Always equal to the config keys.
    pub fn layer_set(&self) -> Vec<usize> {
        match &self.mechanism {
            Mechanism::Rotation(c) => c.layers.keys().copied().collect(),
            Mechanism::Rescaling(c) => c.layers.keys().copied().collect(),
            Mechanism::None => Vec::new(),
        }
    }

    /// Checks layer indices and per-layer widths against a model.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let (layers, expected) = match &self.mechanism {
            Mechanism::Rotation(c) => (&c.layers, config.d_model / 2),
            Mechanism::Rescaling(c) => (&c.layers, config.n_heads),
            Mechanism::None => return Ok(()),
        };
        for (&layer, values) in layers {
            if layer >= config.n_layers {
                return Err(InterventionError::LayerOutOfRange {
                    layer,
                    n_layers: config.n_layers,
                });
            }
            if values.len() != expected {
                return Err(InterventionError::LayerWidth {
                    layer,
                    expected,
                    got: values.len(),
                });
            }
        }
        Ok(())
    }
}

/// Transform applied to the concatenated head vector of one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Hook<'a> {
    Rotate(&'a [f64]),
    Rescale(&'a [f64]),
}

impl Hook<'_> {
    /// Width of the concatenated head vector this hook accepts for a model with
    /// `n_heads` heads of width `head_dim`.
    pub fn expected_width(&self, head_dim: usize) -> usize {
        match self {
            Hook::Rotate(angles) => angles.len() * 2,
            Hook::Rescale(gains) => gains.len() * head_dim,
        }
    }

    /// Applies the hook in place; `concat.len()` must equal
    /// [`Hook::expected_width`].
    pub fn apply(&self, concat: &mut [f64]) -> Result<()> {
        match self {
            Hook::Rotate(angles) => rotate_in_place(angles, concat),
            Hook::Rescale(gains) => {
                if gains.is_empty() || concat.len() % gains.len() != 0 {
                    return Err(InterventionError::WidthMismatch {
                        angles: gains.len(),
                        width: concat.len(),
                    });
                }
                let head_dim = concat.len() / gains.len();
                for (slice, &g) in concat.chunks_exact_mut(head_dim).zip(gains.iter()) {
                    for x in slice {
                        *x *= g;
                    }
                }
                Ok(())
            }
        }
    }
}

/// Hook for `layer`, or `None` when the layer is not intervened.
pub fn make_hook(spec: &InterventionSpec, layer: usize) -> Option<Hook<'_>> {
    match &spec.mechanism {
        Mechanism::Rotation(c) => c.layer(layer).map(Hook::Rotate),
        Mechanism::Rescaling(c) => c.layer(layer).map(Hook::Rescale),
        Mechanism::None => None,
    }
}

/// First half of the layers, `{0, …, ⌈L/2⌉ − 1}`.
pub fn default_layer_set(n_layers: usize) -> Vec<usize> {
    (0..n_layers.div_ceil(2)).collect()
}

/// Number of angles a rotation intervention optimizes: `|L̂| · d/2`.
pub fn param_count(spec: &InterventionSpec, config: &ModelConfig) -> Result<usize> {
    match &spec.mechanism {
        Mechanism::Rotation(c) => Ok(c.layers.len() * config.d_model / 2),
        _ => Err(InterventionError::NotRotation),
    }
}

/// Number of gains a rescaling intervention optimizes: `|L̂| · H`.
pub fn rescale_param_count(layer_set: &[usize], config: &ModelConfig) -> usize {
    layer_set.len() * config.n_heads
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "mechanism", rename_all = "lowercase", deny_unknown_fields)]
enum SpecJson {
    Rotation { layers: BTreeMap<String, Vec<f64>> },
    Rescaling { layers: BTreeMap<String, Vec<f64>> },
    None,
}

fn keys_to_strings(layers: &BTreeMap<usize, Vec<f64>>) -> BTreeMap<String, Vec<f64>> {
    layers.iter().map(|(l, v)| (l.to_string(), v.clone())).collect()
}

fn keys_from_strings(
    layers: BTreeMap<String, Vec<f64>>,
) -> std::result::Result<BTreeMap<usize, Vec<f64>>, String> {
    layers
        .into_iter()
        .map(|(k, v)| {
            k.parse::<usize>()
                .map(|l| (l, v))
                .map_err(|_| format!("layer key {k:?} is not a nonnegative integer"))
        })
        .collect()
}

impl Serialize for InterventionSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match &self.mechanism {
            Mechanism::Rotation(c) => SpecJson::Rotation {
                layers: keys_to_strings(&c.layers),
            },
            Mechanism::Rescaling(c) => SpecJson::Rescaling {
                layers: keys_to_strings(&c.layers),
            },
            Mechanism::None => SpecJson::None,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for InterventionSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error;
        Ok(match SpecJson::deserialize(d)? {
            SpecJson::Rotation { layers } => {
                let layers = keys_from_strings(layers).map_err(D::Error::custom)?;
                Self::rotation(RotationConfig::from_layers(layers).map_err(D::Error::custom)?)
            }
            SpecJson::Rescaling { layers } => {
                let layers = keys_from_strings(layers).map_err(D::Error::custom)?;
                Self::rescaling(RescaleConfig::from_layers(layers).map_err(D::Error::custom)?)
            }
            SpecJson::None => Self::none(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{matvec, norm, Matrix, Rng};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_3, FRAC_PI_6, PI};

    /// Materialized block-diagonal rotation matrix.
    fn dense_rotation(angles: &[f64]) -> Matrix {
        let d = angles.len() * 2;
        let mut m = Matrix::zeros(d, d);
        for (k, &t) in angles.iter().enumerate() {
            m.set(2 * k, 2 * k, t.cos());
            m.set(2 * k, 2 * k + 1, -t.sin());
            m.set(2 * k + 1, 2 * k, t.sin());
            m.set(2 * k + 1, 2 * k + 1, t.cos());
        }
        m
    }

    #[test]
    fn zero_angles_are_identity() {
        let v = [0.3, -1.0, 2.5, 4.0];
        assert_eq!(apply_rotation(&[0.0, 0.0], &v).unwrap(), v.to_vec());
    }

    #[test]
    fn quarter_turn() {
        let out = apply_rotation(&[FRAC_PI_2], &[1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(out[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(out[1], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn matches_materialized_matrix() {
        let angles = [FRAC_PI_6, FRAC_PI_3];
        let v = [1.0, 0.0, 0.0, 1.0];
        let want = matvec(&dense_rotation(&angles), &v).unwrap();
        let got = apply_rotation(&angles, &v).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert_abs_diff_eq!(g, w, epsilon = 1e-12);
        }
        let expected = [0.866025, 0.5, -0.866025, 0.5];
        for (g, e) in got.iter().zip(expected) {
            assert_abs_diff_eq!(*g, e, epsilon = 1e-6);
        }
        for (g, w) in want.iter().zip(expected) {
            assert_abs_diff_eq!(*g, w, epsilon = 1e-6);
        }
    }

    #[test]
    fn odd_width_rejected() {
        assert_eq!(
            apply_rotation(&[0.1], &[1.0, 2.0, 3.0]),
            Err(InterventionError::OddWidth(3))
        );
        assert!(matches!(
            apply_rotation(&[0.1], &[1.0, 2.0, 3.0, 4.0]),
            Err(InterventionError::WidthMismatch { .. })
        ));
    }

    #[test]
    fn wrap_is_canonical() {
        assert_eq!(wrap_angle(0.0), 0.0);
        assert_abs_diff_eq!(wrap_angle(-FRAC_PI_2), 1.5 * PI, epsilon = 1e-15);
        assert_abs_diff_eq!(wrap_angle(5.0 * PI), PI, epsilon = 1e-12);
        assert!(wrap_angle(-1e-18) < TAU);
        let mut c = RotationConfig::default();
        c.set_layer(0, vec![TAU, -0.5]).unwrap();
        assert_eq!(c.layer(0).unwrap()[0], 0.0);
    }

    #[test]
    fn layer_sets() {
        assert_eq!(default_layer_set(8), vec![0, 1, 2, 3]);
        assert_eq!(default_layer_set(1), vec![0]);
        assert_eq!(default_layer_set(7), vec![0, 1, 2, 3]);
    }

    #[test]
    fn parameter_counts() {
        let cfg = ModelConfig::default();
        let first_half = InterventionSpec::rotation(RotationConfig::zeros(&default_layer_set(8), 32));
        let n = param_count(&first_half, &cfg).unwrap();
        assert_eq!(n, 128);
        assert_eq!(n, cfg.d_model * cfg.n_layers / 4);
        let empty = InterventionSpec::rotation(RotationConfig::default());
        assert_eq!(param_count(&empty, &cfg).unwrap(), 0);
        let three = InterventionSpec::rotation(RotationConfig::zeros(&[0, 1, 2], 32));
        assert_eq!(param_count(&three, &cfg).unwrap(), 96);
        assert_eq!(
            param_count(&InterventionSpec::none(), &cfg),
            Err(InterventionError::NotRotation)
        );
        assert_eq!(rescale_param_count(&[0, 1, 2, 3], &cfg), 16);
    }

    #[test]
    fn hooks_only_on_listed_layers() {
        let spec = InterventionSpec::rotation(RotationConfig::zeros(&[1, 3], 2));
        assert!(make_hook(&spec, 0).is_none());
        assert!(matches!(make_hook(&spec, 1), Some(Hook::Rotate(_))));
        assert!(make_hook(&InterventionSpec::none(), 1).is_none());
    }

    #[test]
    fn unit_gains_leave_vector_alone() {
        let gains = [1.0, 1.0];
        let mut v = vec![0.1, 0.2, 0.3, 0.4];
        Hook::Rescale(&gains).apply(&mut v).unwrap();
        assert_eq!(v, vec![0.1, 0.2, 0.3, 0.4]);
        let gains = [0.5, 0.0];
        Hook::Rescale(&gains).apply(&mut v).unwrap();
        assert_eq!(v, vec![0.05, 0.1, 0.0, 0.0]);
    }

    #[test]
    fn full_width_equals_per_head() {
        let mut rng = Rng::seed_from(5);
        let (heads, head_dim) = (4, 6);
        let angles: Vec<f64> = (0..heads * head_dim / 2).map(|_| rng.uniform() * TAU).collect();
        let v: Vec<f64> = (0..heads * head_dim).map(|_| rng.normal()).collect();
        let full = apply_rotation(&angles, &v).unwrap();
        let mut per_head = Vec::new();
        for h in 0..heads {
            let a = &angles[h * head_dim / 2..(h + 1) * head_dim / 2];
            per_head.extend(apply_rotation(a, &v[h * head_dim..(h + 1) * head_dim]).unwrap());
        }
        assert_eq!(full, per_head);
    }

    #[test]
    fn validate_against_model() {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            ..ModelConfig::default()
        };
        let ok = InterventionSpec::rotation(RotationConfig::zeros(&[0, 1], 4));
        ok.validate(&cfg).unwrap();
        let far = InterventionSpec::rotation(RotationConfig::zeros(&[2], 4));
        assert!(matches!(
            far.validate(&cfg),
            Err(InterventionError::LayerOutOfRange { layer: 2, .. })
        ));
        let narrow = InterventionSpec::rotation(RotationConfig::zeros(&[0], 3));
        assert!(matches!(narrow.validate(&cfg), Err(InterventionError::LayerWidth { .. })));
        let gains = InterventionSpec::rescaling(RescaleConfig::ones(&[1], 2));
        gains.validate(&cfg).unwrap();
    }

    #[test]
    fn flat_round_trip_and_errors() {
        let flat = vec![0.0; 6];
        let c = RotationConfig::from_flat(&[2, 0], 3, &flat).unwrap();
        assert_eq!(c.layer_set(), vec![0, 2]);
        assert!(c.layers().values().flatten().all(|&a| a == 0.0));
        assert!(matches!(
            RotationConfig::from_flat(&[0], 3, &flat),
            Err(InterventionError::FlatLength { expected: 3, got: 6 })
        ));
        assert!(matches!(
            RotationConfig::from_flat(&[1, 1], 3, &flat),
            Err(InterventionError::DuplicateLayer(1))
        ));
        assert!(RescaleConfig::from_flat(&[0], 2, &[0.5, 1.5]).is_err());
    }

    #[test]
    fn json_shape() {
        let mut c = RotationConfig::default();
        c.set_layer(0, vec![0.5, 1.0]).unwrap();
        c.set_layer(10, vec![2.0, 3.0]).unwrap();
        let spec = InterventionSpec::rotation(c);
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(
            text,
            r#"{"mechanism":"rotation","layers":{"0":[0.5,1.0],"10":[2.0,3.0]}}"#
        );
        let back: InterventionSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
        let none: InterventionSpec = serde_json::from_str(r#"{"mechanism":"none"}"#).unwrap();
        assert_eq!(none, InterventionSpec::none());
        let bad = serde_json::from_str::<InterventionSpec>(
            r#"{"mechanism":"rescaling","layers":{"0":[2.0]}}"#,
        );
        assert!(bad.is_err());
    }

    proptest! {
        #[test]
        fn rotation_algebra(
            a in prop::collection::vec(0.0..TAU, 1..16),
            seed in any::<u64>(),
        ) {
            let mut rng = Rng::seed_from(seed);
            let b: Vec<f64> = a.iter().map(|_| rng.uniform() * TAU).collect();
            let v: Vec<f64> = a.iter().flat_map(|_| [rng.normal(), rng.normal()]).collect();
            let ra = apply_rotation(&a, &v).unwrap();
            prop_assert!((norm(&ra) - norm(&v)).abs() <= 1e-12 * norm(&v).max(1.0));

            let composed = apply_rotation(&a, &apply_rotation(&b, &v).unwrap()).unwrap();
            let summed: Vec<f64> = a.iter().zip(&b).map(|(x, y)| wrap_angle(x + y)).collect();
            let direct = apply_rotation(&summed, &v).unwrap();
            for (x, y) in composed.iter().zip(&direct) {
                prop_assert!((x - y).abs() <= 1e-12 * norm(&v).max(1.0));
            }

            let neg: Vec<f64> = a.iter().map(|x| -x).collect();
            let back = apply_rotation(&neg, &ra).unwrap();
            for (x, y) in back.iter().zip(&v) {
                prop_assert!((x - y).abs() <= 1e-12 * norm(&v).max(1.0));
            }
        }

        #[test]
        fn flatten_round_trips(
            layers in prop::collection::btree_set(0usize..12, 0..6),
            seed in any::<u64>(),
        ) {
            let layer_set: Vec<usize> = layers.into_iter().collect();
            let mut rng = Rng::seed_from(seed);
            let mut c = RotationConfig::default();
            for &l in &layer_set {
                c.set_layer(l, (0..5).map(|_| rng.uniform() * TAU).collect()).unwrap();
            }
            let flat = c.to_flat();
            prop_assert_eq!(flat.len(), layer_set.len() * 5);
            prop_assert_eq!(RotationConfig::from_flat(&layer_set, 5, &flat).unwrap(), c);
        }
    }
}
