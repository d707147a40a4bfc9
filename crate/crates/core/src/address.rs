//! Layer index and module role of a tensor, recovered from its name.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    MlpUp,
    MlpGate,
    MlpDown,
    Embedding,
    Norm,
    Head,
    Other,
}

/// Coarse grouping used by the signal report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    SelfAttention,
    Mlp,
}

impl Block {
    pub const fn label(self) -> &'static str {
        match self {
            Block::SelfAttention => "Self-Attention",
            Block::Mlp => "MLP",
        }
    }
}

impl Role {
    pub const ALL: [Role; 11] = [
        Role::AttnQ,
        Role::AttnK,
        Role::AttnV,
        Role::AttnO,
        Role::MlpUp,
        Role::MlpGate,
        Role::MlpDown,
        Role::Embedding,
        Role::Norm,
        Role::Head,
        Role::Other,
    ];

    pub const fn as_str(self) -> &'static str {
        match self {
            Role::AttnQ => "attn_q",
            Role::AttnK => "attn_k",
            Role::AttnV => "attn_v",
            Role::AttnO => "attn_o",
            Role::MlpUp => "mlp_up",
            Role::MlpGate => "mlp_gate",
            Role::MlpDown => "mlp_down",
            Role::Embedding => "embedding",
            Role::Norm => "norm",
            Role::Head => "head",
            Role::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.as_str() == s)
    }

    pub const fn block(self) -> Option<Block> {
        match self {
            Role::AttnQ | Role::AttnK | Role::AttnV | Role::AttnO => Some(Block::SelfAttention),
            Role::MlpUp | Role::MlpGate | Role::MlpDown => Some(Block::Mlp),
            _ => None,
        }
    }

    const fn bit(self) -> u16 {
        1 << (self as u16)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A set of [`Role`]s.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct RoleSet(u16);

impl RoleSet {
    pub const EMPTY: RoleSet = RoleSet(0);
    pub const ATTENTION: RoleSet =
        RoleSet(Role::AttnQ.bit() | Role::AttnK.bit() | Role::AttnV.bit() | Role::AttnO.bit());
    pub const MLP: RoleSet = RoleSet(Role::MlpUp.bit() | Role::MlpGate.bit() | Role::MlpDown.bit());
    /// Attention and MLP projections: the default purification scope.
    pub const MATRIX: RoleSet = RoleSet(Self::ATTENTION.0 | Self::MLP.0);
    pub const ALL: RoleSet = RoleSet((1 << Role::ALL.len()) - 1);

    pub const fn contains(self, role: Role) -> bool {
        self.0 & role.bit() != 0
    }

    pub fn insert(&mut self, role: Role) {
        self.0 |= role.bit();
    }

    pub const fn union(self, other: RoleSet) -> RoleSet {
        RoleSet(self.0 | other.0)
    }

    pub const fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Role> {
        Role::ALL.into_iter().filter(move |r| self.contains(*r))
    }

    /// Parses a comma-separated list of role names or the group names
    /// `all`, `matrix`, `attention`, `mlp`.
    pub fn parse(s: &str) -> Option<RoleSet> {
        let mut set = RoleSet::EMPTY;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let add = match part {
                "all" => RoleSet::ALL,
                "matrix" => RoleSet::MATRIX,
                "attention" => RoleSet::ATTENTION,
                "mlp" => RoleSet::MLP,
                other => RoleSet::from_iter([Role::parse(other)?]),
            };
            set = set.union(add);
        }
        Some(set)
    }

    pub fn names(self) -> Vec<String> {
        self.iter().map(|r| r.as_str().to_string()).collect()
    }
}

impl FromIterator<Role> for RoleSet {
    fn from_iter<I: IntoIterator<Item = Role>>(iter: I) -> Self {
        let mut set = RoleSet::EMPTY;
        for r in iter {
            set.insert(r);
        }
        set
    }
}

impl fmt::Debug for RoleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl Serialize for RoleSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.iter().map(Role::as_str))
    }
}

impl<'de> Deserialize<'de> for RoleSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        let mut set = RoleSet::EMPTY;
        for n in &names {
            let part = RoleSet::parse(n)
                .ok_or_else(|| serde::de::Error::custom(alloc::format!("unknown role `{n}`")))?;
            set = set.union(part);
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorAddress {
    pub layer: Option<usize>,
    pub role: Role,
}

impl TensorAddress {
    pub const UNKNOWN: TensorAddress = TensorAddress { layer: None, role: Role::Other };

    pub const fn new(layer: Option<usize>, role: Role) -> Self {
        Self { layer, role }
    }
}

/// Maps a tensor name to its address. Must be total and deterministic.
pub trait AddressResolver {
    fn resolve(&self, name: &str) -> TensorAddress;
}

impl<F: Fn(&str) -> TensorAddress> AddressResolver for F {
    fn resolve(&self, name: &str) -> TensorAddress {
        self(name)
    }
}

/// Built-in naming schemes, parsed without regular expressions:
///
/// * `layer.{l}.{role}` and `head` (synthetic models), where `{role}` is a
///   [`Role`] name;
/// * `...layers.{l}.self_attn.{q,k,v,o}_proj.{weight,bias}`,
///   `...layers.{l}.mlp.{up,gate,down}_proj.{weight,bias}`,
///   `...layers.{l}.*norm*.weight`, `...embed_tokens.weight`,
///   `lm_head.weight` and a final `...norm.weight`.
///
/// Anything else resolves to [`TensorAddress::UNKNOWN`].
#[derive(Debug, Clone, Copy, Default)]
pub struct SchemeResolver;

impl AddressResolver for SchemeResolver {
    fn resolve(&self, name: &str) -> TensorAddress {
        resolve_simlab(name)
            .or_else(|| resolve_transformer(name))
            .unwrap_or(TensorAddress::UNKNOWN)
    }
}

fn parse_index(s: &str) -> Option<usize> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    s.parse().ok()
}

fn resolve_simlab(name: &str) -> Option<TensorAddress> {
    if name == "head" {
        return Some(TensorAddress::new(None, Role::Head));
    }
    let mut parts = name.split('.');
    if parts.next()? != "layer" {
        return None;
    }
    let layer = parse_index(parts.next()?)?;
    let role = Role::parse(parts.next()?)?;
    if parts.next().is_some() {
        return None;
    }
    Some(TensorAddress::new(Some(layer), role))
}

fn resolve_transformer(name: &str) -> Option<TensorAddress> {
    let parts: Vec<&str> = name.split('.').collect();
    let last = *parts.last()?;
    if last != "weight" && last != "bias" {
        return None;
    }
    if let Some(pos) = parts.iter().position(|p| *p == "layers") {
        let layer = parse_index(parts.get(pos + 1)?)?;
        let rest = &parts[pos + 2..parts.len() - 1];
        let role = match rest {
            ["self_attn", proj] => match *proj {
                "q_proj" => Role::AttnQ,
                "k_proj" => Role::AttnK,
                "v_proj" => Role::AttnV,
                "o_proj" => Role::AttnO,
                _ => return None,
            },
            ["mlp", proj] => match *proj {
                "up_proj" => Role::MlpUp,
                "gate_proj" => Role::MlpGate,
                "down_proj" => Role::MlpDown,
                _ => return None,
            },
            [norm] if norm.contains("norm") => Role::Norm,
            _ => return None,
        };
        return Some(TensorAddress::new(Some(layer), role));
    }
    let stem = *parts.get(parts.len().checked_sub(2)?)?;
    let role = match stem {
        "embed_tokens" => Role::Embedding,
        "lm_head" => Role::Head,
        s if s.contains("norm") => Role::Norm,
        _ => return None,
    };
    Some(TensorAddress::new(None, role))
}
