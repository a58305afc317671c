//! Parameter registry. Fused tensors are split into atomic modules, each with
//! its own radius, scaler, optimizer and state.
//!
//! Fused layouts are row-stacked: `[Q heads; K heads; V heads]` for attention
//! projections and `[gate; up]` for SwiGLU.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matlin::Matrix;
use crate::optim::OptimizerState;
use crate::spectral_geom::{spectral_init_with_triplet, RadiusSpec, ScalerKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule {
    QkvPerHead { num_heads: usize, head_dim: usize },
    GateUpSeparate,
    NoSplit,
}

/// One row block of a fused tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleBlock {
    pub name: String,
    pub row_offset: usize,
    pub weight: Matrix,
}

impl ModuleBlock {
    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }
}

/// Names and row ranges a rule produces for a fused tensor of `rows` rows.
pub fn split_layout(prefix: &str, rows: usize, rule: SplitRule) -> Result<Vec<(String, usize, usize)>> {
    match rule {
        SplitRule::NoSplit => Ok(vec![(prefix.to_string(), 0, rows)]),
        SplitRule::GateUpSeparate => {
            if rows % 2 != 0 {
                return Err(Error::ShapeMismatch(format!("gate/up split of {rows} rows")));
            }
            let half = rows / 2;
            Ok(vec![
                (format!("{prefix}.gate"), 0, half),
                (format!("{prefix}.up"), half, half),
            ])
        }
        SplitRule::QkvPerHead { num_heads, head_dim } => {
            if num_heads == 0 || head_dim == 0 || rows != 3 * num_heads * head_dim {
                return Err(Error::ShapeMismatch(format!(
                    "qkv split of {rows} rows into 3 x {num_heads} heads x {head_dim}"
                )));
            }
            let mut out = Vec::with_capacity(3 * num_heads);
            for (p, proj) in ["q", "k", "v"].iter().enumerate() {
                for h in 0..num_heads {
                    out.push((
                        format!("{prefix}.{proj}.head{h}"),
                        (p * num_heads + h) * head_dim,
                        head_dim,
                    ));
                }
            }
            Ok(out)
        }
    }
}

/// Splits a fused tensor into contiguous row blocks.
pub fn split_fused(prefix: &str, fused: &Matrix, rule: SplitRule) -> Result<Vec<ModuleBlock>> {
    Ok(split_layout(prefix, fused.rows(), rule)?
        .into_iter()
        .map(|(name, row_offset, rows)| ModuleBlock {
            name,
            row_offset,
            weight: fused.row_block(row_offset, rows),
        })
        .collect())
}

/// Inverse of [`split_fused`].
pub fn concat_blocks(blocks: &[ModuleBlock]) -> Result<Matrix> {
    let refs: Vec<&Matrix> = blocks.iter().map(|b| &b.weight).collect();
    Matrix::vstack(&refs)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sso,
    MuonSphere,
    Muon,
    #[serde(rename = "adamw")]
    AdamW,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sso => "sso",
            OptimizerKind::MuonSphere => "muon_sphere",
            OptimizerKind::Muon => "muon",
            OptimizerKind::AdamW => "adamw",
        }
    }

    /// Constrains the weight to its spectral sphere.
    pub fn is_sphere(self) -> bool {
        matches!(self, OptimizerKind::Sso | OptimizerKind::MuonSphere)
    }
}

/// What a module does in the network; only `Hidden` modules are spectral.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleRole {
    Hidden,
    Embedding,
    Head,
    Gain,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

/// Toy architectures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArchConfig {
    Linear {
        d_in: usize,
        d_out: usize,
    },
    Mlp {
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        #[serde(default)]
        activation: Activation,
    },
    /// One pre-norm block: attention then SwiGLU, byte-level vocabulary.
    Transformer {
        d_model: usize,
        n_heads: usize,
        head_dim: usize,
        d_ff: usize,
        seq_len: usize,
        #[serde(default = "yes")]
        split_qkv: bool,
        #[serde(default = "yes")]
        split_gate_up: bool,
    },
}

fn yes() -> bool {
    true
}

/// Byte-level vocabulary of the character model (7-bit ASCII).
pub const VOCAB: usize = 128;

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.to_string()));
        match *self {
            ArchConfig::Linear { d_in, d_out } => {
                if d_in == 0 || d_out == 0 {
                    return bad("linear dims must be positive");
                }
            }
            ArchConfig::Mlp { d_in, d_hidden, d_out, .. } => {
                if d_in == 0 || d_hidden == 0 || d_out == 0 {
                    return bad("mlp dims must be positive");
                }
            }
            ArchConfig::Transformer { d_model, n_heads, head_dim, d_ff, seq_len, .. } => {
                if d_model == 0 || n_heads == 0 || head_dim == 0 || d_ff == 0 || seq_len == 0 {
                    return bad("transformer dims must be positive");
                }
                if d_model > 256 {
                    return bad("toy transformer width is capped at 256");
                }
            }
        }
        Ok(())
    }

    /// Same architecture with its width set to `width`.
    pub fn with_width(&self, width: usize) -> Result<ArchConfig> {
        match self.clone() {
            ArchConfig::Mlp { d_in, d_out, activation, .. } => Ok(ArchConfig::Mlp {
                d_in,
                d_hidden: width,
                d_out,
                activation,
            }),
            ArchConfig::Transformer { d_model, head_dim, d_ff, seq_len, split_qkv, split_gate_up, .. } => {
                if width % head_dim != 0 {
                    return Err(Error::ConfigInvalid(format!(
                        "width {width} is not a multiple of head_dim {head_dim}"
                    )));
                }
                Ok(ArchConfig::Transformer {
                    d_model: width,
                    n_heads: width / head_dim,
                    head_dim,
                    d_ff: d_ff * width / d_model,
                    seq_len,
                    split_qkv,
                    split_gate_up,
                })
            }
            ArchConfig::Linear { .. } => Err(Error::ConfigInvalid("a linear probe has no hidden width".into())),
        }
    }

    /// Logical tensors in forward order: (name, role, rows, cols, split rule).
    pub fn tensors(&self) -> Vec<(String, ModuleRole, usize, usize, SplitRule)> {
        use ModuleRole::*;
        match *self {
            ArchConfig::Linear { d_in, d_out } => vec![("layer0".into(), Hidden, d_out, d_in, SplitRule::NoSplit)],
            ArchConfig::Mlp { d_in, d_hidden, d_out, .. } => vec![
                ("layer0".into(), Hidden, d_hidden, d_in, SplitRule::NoSplit),
                ("layer1".into(), Hidden, d_out, d_hidden, SplitRule::NoSplit),
            ],
            ArchConfig::Transformer { d_model, n_heads, head_dim, d_ff, split_qkv, split_gate_up, .. } => {
                let inner = n_heads * head_dim;
                let qkv_rule = if split_qkv {
                    SplitRule::QkvPerHead { num_heads: n_heads, head_dim }
                } else {
                    SplitRule::NoSplit
                };
                let gu_rule = if split_gate_up { SplitRule::GateUpSeparate } else { SplitRule::NoSplit };
                vec![
                    ("embed".into(), Embedding, VOCAB, d_model, SplitRule::NoSplit),
                    ("layer0.attn_norm".into(), Gain, 1, d_model, SplitRule::NoSplit),
                    ("layer0.attn".into(), Hidden, 3 * inner, d_model, qkv_rule),
                    ("layer0.attn.o".into(), Hidden, d_model, inner, SplitRule::NoSplit),
                    ("layer0.ffn_norm".into(), Gain, 1, d_model, SplitRule::NoSplit),
                    ("layer0.ffn".into(), Hidden, 2 * d_ff, d_model, gu_rule),
                    ("layer0.ffn.down".into(), Hidden, d_model, d_ff, SplitRule::NoSplit),
                    ("final_norm".into(), Gain, 1, d_model, SplitRule::NoSplit),
                    ("head".into(), Head, VOCAB, d_model, SplitRule::NoSplit),
                ]
            }
        }
    }
}

/// The smallest matrix optimized as one spectral unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomicModule {
    pub name: String,
    pub d_out: usize,
    pub d_in: usize,
    pub weight: Matrix,
    pub radius: RadiusSpec,
    pub scaler: ScalerKind,
    pub optimizer_kind: OptimizerKind,
    pub role: ModuleRole,
    pub state: OptimizerState,
}

impl AtomicModule {
    pub fn is_spectral(&self) -> bool {
        self.role == ModuleRole::Hidden
    }
}

/// A logical (possibly fused) tensor and the modules it is made of.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub rule: SplitRule,
    pub rows: usize,
    pub cols: usize,
    pub members: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitOptions {
    pub radius_c: f64,
    pub init_std: f64,
    pub seed: u64,
    pub scaler: ScalerKind,
    /// Optimizer for hidden modules; the rest always use AdamW.
    pub optimizer: OptimizerKind,
}

impl Default for InitOptions {
    fn default() -> Self {
        InitOptions {
            radius_c: 2.0,
            init_std: crate::spectral_geom::INIT_STD,
            seed: 0,
            scaler: ScalerKind::SpectralMup,
            optimizer: OptimizerKind::Sso,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub modules: Vec<AtomicModule>,
    pub groups: Vec<ParamGroup>,
}

/// Builds every module of `arch`. Hidden modules are initialized on their own
/// spectral sphere; embeddings, heads and gains are plain (AdamW-handled).
pub fn init_registry(arch: &ArchConfig, opts: &InitOptions) -> Result<Registry> {
    arch.validate()?;
    if !(opts.radius_c > 0.0) {
        return Err(Error::ConfigInvalid(format!("radius_c must be positive, got {}", opts.radius_c)));
    }
    let mut modules = Vec::new();
    let mut groups = Vec::new();
    for (name, role, rows, cols, rule) in arch.tensors() {
        let layout = split_layout(&name, rows, rule)?;
        let mut members = Vec::with_capacity(layout.len());
        for (mname, _, mrows) in layout {
            let idx = modules.len();
            let radius = RadiusSpec::new(opts.radius_c, mrows, cols)?;
            let seed = opts.seed.wrapping_mul(0x9E37_79B9).wrapping_add(1000 * idx as u64);
            let mut state = OptimizerState::new(mrows, cols);
            let weight = match role {
                ModuleRole::Hidden => {
                    let (w, t) = spectral_init_with_triplet(mrows, cols, &radius, opts.init_std, seed)?;
                    state.cached_u = Some(t.u);
                    state.cached_v = Some(t.v);
                    w
                }
                ModuleRole::Gain => Matrix::from_fn(mrows, cols, |_, _| 1.0),
                ModuleRole::Embedding => {
                    Matrix::random_normal(mrows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
                }
                ModuleRole::Head => Matrix::random_normal(
                    mrows,
                    cols,
                    1.0 / cols as f64,
                    &mut ChaCha8Rng::seed_from_u64(seed),
                ),
            };
            let optimizer_kind = if role == ModuleRole::Hidden { opts.optimizer } else { OptimizerKind::AdamW };
            modules.push(AtomicModule {
                name: mname,
                d_out: mrows,
                d_in: cols,
                weight,
                radius,
                scaler: opts.scaler,
                optimizer_kind,
                role,
                state,
            });
            members.push(idx);
        }
        groups.push(ParamGroup { name, rule, rows, cols, members });
    }
    let reg = Registry { modules, groups };
    reg.check()?;
    Ok(reg)
}

impl Registry {
    /// Unique names and shapes consistent with each module's radius.
    pub fn check(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (i, m) in self.modules.iter().enumerate() {
            if seen.insert(m.name.as_str(), i).is_some() {
                return Err(Error::ConfigInvalid(format!("duplicate module name `{}`", m.name)));
            }
            if m.weight.shape() != (m.d_out, m.d_in) || (m.radius.d_out, m.radius.d_in) != (m.d_out, m.d_in) {
                return Err(Error::ShapeMismatch(format!("module `{}` shape disagrees with its metadata", m.name)));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&AtomicModule> {
        self.modules.iter().find(|m| m.name == name)
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    /// The fused tensor of a group, rebuilt by stacking its members.
    pub fn group_weight(&self, group: &ParamGroup) -> Matrix {
        if group.members.len() == 1 {
            return self.modules[group.members[0]].weight.clone();
        }
        let refs: Vec<&Matrix> = group.members.iter().map(|&i| &self.modules[i].weight).collect();
        Matrix::vstack(&refs).expect("group members share a column count")
    }

    pub fn group_weight_by_name(&self, name: &str) -> Matrix {
        let g = self.group(name).unwrap_or_else(|| panic!("no parameter group `{name}`"));
        self.group_weight(g)
    }

    /// Splits a gradient for a fused tensor along the group's rule.
    pub fn split_group_grad(&self, group: &ParamGroup, grad: &Matrix) -> Result<Vec<(usize, Matrix)>> {
        if grad.shape() != (group.rows, group.cols) {
            return Err(Error::ShapeMismatch(format!(
                "gradient {:?} for group `{}` of shape {}x{}",
                grad.shape(),
                group.name,
                group.rows,
                group.cols
            )));
        }
        let blocks = split_fused(&group.name, grad, group.rule)?;
        Ok(group.members.iter().copied().zip(blocks.into_iter().map(|b| b.weight)).collect())
    }

    pub fn spectral_modules(&self) -> impl Iterator<Item = &AtomicModule> {
        self.modules.iter().filter(|m| m.is_spectral())
    }

    /// Switches every hidden module to `kind`, resetting its moments.
    pub fn set_hidden_optimizer(&mut self, kind: OptimizerKind) {
        for m in self.modules.iter_mut().filter(|m| m.role == ModuleRole::Hidden) {
            m.optimizer_kind = kind;
            m.state.reset_moments();
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Registry> {
        let r: Registry = serde_json::from_str(s)?;
        r.check()?;
        Ok(r)
    }
}
