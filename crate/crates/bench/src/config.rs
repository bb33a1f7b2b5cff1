//! Flat JSON run configuration. Every key has a default and
//! `print-config` shows all of them.

use std::path::Path;

use anyhow::Context;
use pgf_core::param_grad::Loss;
use pgf_core::{Activation, Discretization, GlrParams, InputMode, Scalar};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub block: usize,
    pub activation: Activation,
    pub discretization: Discretization,
    pub input_mode: InputMode,
    pub fd_eps: f64,

    pub verify_lengths: Vec<usize>,
    pub verify_d: Vec<usize>,
    pub verify_n: Vec<usize>,
    pub verify_seeds: u64,
    pub verify_tol_unrolled: f64,
    pub verify_tol_fd: f64,

    pub invariance_points: usize,
    pub invariance_min_len: usize,
    pub invariance_max_len: usize,
    pub invariance_d: usize,
    pub invariance_n: usize,
    pub invariance_alpha: f64,

    pub ghost_len: usize,
    pub ghost_t0: usize,
    pub ghost_eps: f64,
    pub ghost_channel: usize,
    pub ghost_d: usize,
    pub ghost_n: usize,

    pub stiffness_min: f64,
    pub stiffness_max: f64,
    pub stiffness_points: usize,
    pub stiffness_len: usize,
    pub stiffness_block: usize,
    pub stiffness_d: usize,
    pub stiffness_n: usize,
    pub stiffness_tol: f64,

    pub memory_lengths: Vec<usize>,
    pub memory_unrolled_lengths: Vec<usize>,
    pub memory_d: usize,
    pub memory_n: usize,

    pub complexity_n: Vec<usize>,
    pub complexity_d: usize,
    pub complexity_pgf_len: usize,
    pub complexity_rtrl_len: usize,
    pub complexity_repeats: usize,
    pub complexity_rtrl_min_slope: f64,
    pub complexity_pgf_max_slope: f64,

    pub hessian_len: usize,
    pub hessian_d: usize,
    pub hessian_n: usize,
    pub hessian_tol: f64,
    pub hessian_symmetry_tol: f64,

    pub params_len: usize,
    pub params_d: usize,
    pub params_n: usize,
    pub params_block: usize,
    pub params_loss: Loss,
    pub params_tol: f64,
    pub params_block_tol: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 7,
            block: 256,
            activation: Activation::Silu,
            discretization: Discretization::Zoh,
            input_mode: InputMode::Selective,
            fd_eps: 1e-5,

            verify_lengths: vec![128, 512, 2048, 8192],
            verify_d: vec![2, 4],
            verify_n: vec![4, 16],
            verify_seeds: 5,
            verify_tol_unrolled: 1e-12,
            verify_tol_fd: 1e-5,

            invariance_points: 30,
            invariance_min_len: 100,
            invariance_max_len: 100_000,
            invariance_d: 2,
            invariance_n: 4,
            invariance_alpha: 0.05,

            ghost_len: 128_000,
            ghost_t0: 100_000,
            ghost_eps: 1e-6,
            ghost_channel: 0,
            ghost_d: 4,
            ghost_n: 8,

            stiffness_min: -8.0,
            stiffness_max: -1.0,
            stiffness_points: 15,
            stiffness_len: 64,
            stiffness_block: 16,
            stiffness_d: 2,
            stiffness_n: 4,
            stiffness_tol: 1e-6,

            memory_lengths: vec![10_000, 20_000, 40_000],
            memory_unrolled_lengths: vec![1000, 2000, 4000],
            memory_d: 4,
            memory_n: 16,

            complexity_n: vec![8, 16, 32, 64],
            complexity_d: 4,
            complexity_pgf_len: 20_000,
            complexity_rtrl_len: 1000,
            complexity_repeats: 5,
            complexity_rtrl_min_slope: 2.5,
            complexity_pgf_max_slope: 1.3,

            hessian_len: 256,
            hessian_d: 2,
            hessian_n: 4,
            hessian_tol: 1e-4,
            hessian_symmetry_tol: 1e-12,

            params_len: 128,
            params_d: 2,
            params_n: 4,
            params_block: 16,
            params_loss: Loss::SumOfSquares,
            params_tol: 1e-5,
            params_block_tol: 1e-12,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// sha256 of the compact JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(bytes))
    }

    /// Random parameters with the configured structural switches.
    pub fn params<T: Scalar>(&self, d: usize, n: usize, seed: u64) -> GlrParams<T> {
        GlrParams::<f64>::random(d, n, seed)
            .with_activation(self.activation)
            .with_discretization(self.discretization)
            .with_input_mode(self.input_mode)
            .cast()
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
