//! Q-network architectures named `FAMILY-WIDTHxDEPTH`.
//!
//! * `MLP-HxL`: flattened window, `L` ReLU dense layers of `H` units.
//! * `CNN-FxL`: `L` blocks of conv(3, stride 1, ReLU) + max-pool(2), then
//!   ReLU dense layers of 48 and 24 units.
//! * `GRU-CxL` / `LSTM-CxL`: `L` stacked recurrent layers of `C` units, all
//!   but the last emitting full sequences, then two ReLU dense layers of `C`.
//!
//! Every head ends in a linear dense layer with one output per action.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::games::Action;
use crate::nnkit::{grad_check_with, GradCheckOptions, GradCheckReport, CONV_KERNEL};
use crate::nnkit::{weights, Activation, LayerKind, Network, ReturnMode, Tensor2, POOL_SIZE};

pub const N_ACTIONS: usize = Action::ALL.len();
pub const DEFAULT_WINDOW: usize = 40;
pub const CNN_DENSE_UNITS: [usize; 2] = [48, 24];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "MLP")]
    Mlp,
    #[serde(rename = "GRU")]
    Gru,
    #[serde(rename = "LSTM")]
    Lstm,
    #[serde(rename = "CNN")]
    Cnn,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Mlp, Family::Gru, Family::Lstm, Family::Cnn];

    pub fn name(self) -> &'static str {
        match self {
            Family::Mlp => "MLP",
            Family::Gru => "GRU",
            Family::Lstm => "LSTM",
            Family::Cnn => "CNN",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetSpec {
    pub family: Family,
    pub width: usize,
    pub depth: usize,
    pub window: usize,
    pub channels: usize,
}

impl NetSpec {
    pub fn new(family: Family, width: usize, depth: usize, channels: usize) -> Self {
        Self {
            family,
            width,
            depth,
            window: DEFAULT_WINDOW,
            channels,
        }
    }

    /// Parses `FAMILY-WIDTHxDEPTH`, case-insensitively. `×` is accepted for `x`.
    pub fn parse(name: &str, channels: usize) -> Result<Self> {
        let err = |reason: &str| Error::SpecParse {
            name: name.to_string(),
            reason: reason.to_string(),
        };
        let (fam, dims) = name
            .trim()
            .split_once('-')
            .ok_or_else(|| err("expected FAMILY-WIDTHxDEPTH"))?;
        let family = Family::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(fam))
            .ok_or_else(|| err("unknown family"))?;
        let dims = dims.to_ascii_lowercase().replace('×', "x");
        let (w, d) = dims
            .split_once('x')
            .ok_or_else(|| err("expected WIDTHxDEPTH after the family"))?;
        let width: usize = w
            .parse()
            .map_err(|_| err("width is not a positive integer"))?;
        let depth: usize = d
            .parse()
            .map_err(|_| err("depth is not a positive integer"))?;
        if width == 0 || depth == 0 {
            return Err(err("width and depth must be at least 1"));
        }
        if channels == 0 {
            return Err(err("channels must be at least 1"));
        }
        Ok(Self::new(family, width, depth, channels))
    }

    /// Name plus input shape; stored in weight files.
    pub fn label(&self) -> String {
        format!("{self}/{}x{}", self.window, self.channels)
    }

    pub fn input_shape(&self) -> (usize, usize) {
        (self.window, self.channels)
    }
}

impl fmt::Display for NetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}x{}", self.family.name(), self.width, self.depth)
    }
}

fn dense(inputs: usize, units: usize, activation: Activation) -> LayerKind {
    LayerKind::Dense {
        inputs,
        units,
        activation,
    }
}

/// The layer sequence for `spec`.
pub fn build_layers(spec: &NetSpec) -> Result<Vec<LayerKind>> {
    let NetSpec {
        family,
        width,
        depth,
        window,
        channels,
    } = *spec;
    let mut layers = Vec::new();
    let head_in = match family {
        Family::Mlp => {
            layers.push(LayerKind::Flatten);
            let mut inputs = window * channels;
            for _ in 0..depth {
                layers.push(dense(inputs, width, Activation::Relu));
                inputs = width;
            }
            width
        }
        Family::Cnn => {
            let mut len = window;
            let mut in_channels = channels;
            for block in 0..depth {
                if len < CONV_KERNEL || (len - CONV_KERNEL + 1) < POOL_SIZE {
                    return Err(Error::Config(format!(
                        "{spec}: sequence of length {len} too short for conv block {}",
                        block + 1
                    )));
                }
                layers.push(LayerKind::Conv1D {
                    in_channels,
                    filters: width,
                });
                layers.push(LayerKind::MaxPool1D);
                len = (len - CONV_KERNEL + 1) / POOL_SIZE;
                in_channels = width;
            }
            layers.push(LayerKind::Flatten);
            let mut inputs = len * width;
            for units in CNN_DENSE_UNITS {
                layers.push(dense(inputs, units, Activation::Relu));
                inputs = units;
            }
            inputs
        }
        Family::Gru | Family::Lstm => {
            let mut inputs = channels;
            for l in 0..depth {
                let ret = if l + 1 == depth {
                    ReturnMode::Last
                } else {
                    ReturnMode::Sequence
                };
                layers.push(match family {
                    Family::Gru => LayerKind::Gru {
                        inputs,
                        units: width,
                        ret,
                    },
                    _ => LayerKind::Lstm {
                        inputs,
                        units: width,
                        ret,
                    },
                });
                inputs = width;
            }
            for _ in 0..2 {
                layers.push(dense(width, width, Activation::Relu));
            }
            width
        }
    };
    layers.push(dense(head_in, N_ACTIONS, Activation::Linear));
    Ok(layers)
}

/// Number of scalar parameters of `spec` without allocating the network.
pub fn count_params(spec: &NetSpec) -> Result<usize> {
    Ok(build_layers(spec)?.iter().map(LayerKind::param_count).sum())
}

/// A network whose outputs are the Q-values of CASH, BUY and HOLD.
#[derive(Clone, Debug, PartialEq)]
pub struct QNetwork {
    spec: NetSpec,
    net: Network,
}

impl QNetwork {
    pub fn zeros(spec: NetSpec) -> Result<Self> {
        let net = Network::zeros(spec.input_shape(), build_layers(&spec)?)?;
        Ok(Self { spec, net })
    }

    /// Glorot-initialized from `seed`.
    pub fn new(spec: NetSpec, seed: u64) -> Result<Self> {
        let mut q = Self::zeros(spec)?;
        q.net.init_glorot(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(q)
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn count_params(&self) -> usize {
        self.net.count_params()
    }

    pub fn q_values(&self, state: &Tensor2) -> Result<[f64; N_ACTIONS]> {
        let y = self.net.predict(state)?;
        Ok([y[0], y[1], y[2]])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        weights::encode(&self.net, &self.spec.label())
    }

    pub fn from_bytes(spec: NetSpec, bytes: &[u8]) -> Result<Self> {
        let mut q = Self::zeros(spec)?;
        weights::load_weights(bytes, &spec.label(), &mut q.net)?;
        Ok(q)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(spec: NetSpec, path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(spec, &bytes)
    }
}

/// Finite-difference check of `spec` at a seeded Glorot initialization with
/// small random biases and a random input in the range of normalized windows.
pub fn check_gradients(
    spec: NetSpec,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut q = QNetwork::new(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    for p in q.net.params_mut().iter_mut() {
        if p.value.rows() == 1 {
            p.value
                .as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
    }
    let (rows, cols) = spec.input_shape();
    let input = Tensor2::from_fn(rows, cols, |_, _| rng.random_range(-0.3..0.3));
    grad_check_with(&mut q.net, &input, opts)
}

/// Architectures of the comparison table with their expected parameter
/// counts for 1-channel and 2-channel inputs.
pub const REFERENCE_PARAM_COUNTS: [(&str, usize, usize); 16] = [
    ("MLP-16x4", 1523, 2163),
    ("MLP-16x5", 1795, 2435),
    ("MLP-32x4", 4579, 5859),
    ("MLP-32x5", 5635, 6915),
    ("GRU-8x3", 1227, 1251),
    ("GRU-16x3", 4627, 4675),
    ("GRU-16x2", 3043, 3091),
    ("GRU-32x3", 17955, 18051),
    ("LSTM-8x3", 1579, 1611),
    ("LSTM-16x3", 5971, 6035),
    ("LSTM-16x2", 3859, 3923),
    ("LSTM-32x3", 23203, 23331),
    ("CNN-8x3", 2883, 2907),
    ("CNN-16x3", 5235, 5283),
    ("CNN-16x2", 8291, 8339),
    ("CNN-32x3", 12243, 12339),
];

pub fn reference_specs() -> impl Iterator<Item = &'static str> {
    REFERENCE_PARAM_COUNTS.iter().map(|r| r.0)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRow {
    pub name: String,
    pub univariate: usize,
    pub bivariate: usize,
}

/// Computed parameter counts for every reference architecture.
pub fn param_table() -> Vec<ParamRow> {
    reference_specs()
        .map(|name| {
            let count = |ch| {
                count_params(&NetSpec::parse(name, ch).expect("fixture names parse"))
                    .expect("fixture architectures build")
            };
            ParamRow {
                name: name.to_string(),
                univariate: count(1),
                bivariate: count(2),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_examples() {
        let s = NetSpec::parse("MLP-16x4", 1).unwrap();
        assert_eq!(s, NetSpec::new(Family::Mlp, 16, 4, 1));
        assert_eq!(s.window, 40);
        let g = NetSpec::parse("gru-8x3", 2).unwrap();
        assert_eq!(
            (g.family, g.width, g.depth, g.channels),
            (Family::Gru, 8, 3, 2)
        );
        assert_eq!(NetSpec::parse("LSTM-16×2", 1).unwrap().depth, 2);
    }

    #[test]
    fn parse_errors_list_families() {
        for bad in ["CNN-3", "RNN-8x3", "MLP-0x2", "MLP16x4", "MLP-axb", ""] {
            let err = NetSpec::parse(bad, 1).unwrap_err();
            assert!(err.to_string().contains("MLP, GRU, LSTM, CNN"), "{err}");
        }
    }

    #[test]
    fn display_round_trips() {
        for name in reference_specs() {
            assert_eq!(NetSpec::parse(name, 1).unwrap().to_string(), name);
        }
    }

    #[test]
    fn spot_counts() {
        let c = |n: &str, ch| count_params(&NetSpec::parse(n, ch).unwrap()).unwrap();
        assert_eq!(c("MLP-16x4", 1), 1523);
        assert_eq!(c("LSTM-8x3", 2), 1611);
        assert_eq!(c("CNN-32x3", 1), 12243);
        assert_eq!(c("GRU-16x2", 1), 3043);
        assert_eq!(c("CNN-16x2", 1), 8291);
        assert_eq!(c("MLP-32x5", 2), 6915);
    }

    #[test]
    fn table_matches_reference() {
        for (row, (name, uni, bi)) in param_table().iter().zip(REFERENCE_PARAM_COUNTS) {
            assert_eq!(
                (row.name.as_str(), row.univariate, row.bivariate),
                (name, uni, bi)
            );
        }
    }

    #[test]
    fn cnn_too_deep_is_config_error() {
        assert!(count_params(&NetSpec::parse("CNN-8x3", 1).unwrap()).is_ok());
        let err = count_params(&NetSpec::parse("CNN-8x4", 1).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn recurrent_stacks_emit_sequences_until_last() {
        let layers = build_layers(&NetSpec::parse("LSTM-16x3", 1).unwrap()).unwrap();
        let rets: Vec<_> = layers
            .iter()
            .filter_map(|l| match l {
                LayerKind::Lstm { ret, .. } => Some(*ret),
                _ => None,
            })
            .collect();
        assert_eq!(
            rets,
            vec![ReturnMode::Sequence, ReturnMode::Sequence, ReturnMode::Last]
        );
    }

    #[test]
    fn weights_for_other_spec_are_rejected() {
        let mlp = QNetwork::new(NetSpec::parse("MLP-16x4", 1).unwrap(), 0).unwrap();
        let err = QNetwork::from_bytes(NetSpec::parse("GRU-8x3", 1).unwrap(), &mlp.to_bytes())
            .unwrap_err();
        assert!(matches!(err, Error::WeightSpecMismatch { .. }));
    }
}
